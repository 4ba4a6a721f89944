//! File formats, image IO and the command-line pipelines built on
//! [`afd_core`].

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod dctg;
pub mod error;
pub mod imageio;
pub mod manifest;

pub use afd_core;
pub use error::{AfdError, Result};
