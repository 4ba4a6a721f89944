#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adam;
pub mod backbone;
pub mod color;
pub mod conv;
pub mod dct;
pub mod dct_grid;
pub mod error;
pub mod fde;
pub mod fenet;
pub mod gradcheck;
pub mod image;
pub mod jpeg;
pub mod params;
pub mod repconv;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
