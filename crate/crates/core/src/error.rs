use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("zero-norm vector cannot be normalized")]
    ZeroVector,
    #[error("ROI mask selects no pixels")]
    EmptyMask,
    #[error("codec failure: {0}")]
    Codec(String),
    #[error("scorer failure: {0}")]
    Scorer(String),
    #[error("training diverged after {halvings} learning-rate halvings at epoch {epoch}")]
    Training {
        epoch: usize,
        halvings: usize,
        trace: alloc::vec::Vec<f64>,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }

    pub(crate) fn mismatch(expected: impl core::fmt::Display, actual: impl core::fmt::Display) -> Self {
        use alloc::string::ToString;
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
