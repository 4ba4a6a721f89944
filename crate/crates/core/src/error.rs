use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite loss at iteration {iteration} (lr {lr:e})")]
    NumericFailure { iteration: usize, lr: f32 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_mismatch(left: impl core::fmt::Debug, right: impl core::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        left: alloc::format!("{left:?}"),
        right: alloc::format!("{right:?}"),
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
