use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image too small for the SSIM window: {width}x{height}, need at least {min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unknown recipe `{0}`")]
    UnknownRecipe(String),
    #[error("decode error: {0}")]
    Decode(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
