use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported input: {0}")]
    UnsupportedInput(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("storage error at {}: {message}", path.display())]
    Storage { path: PathBuf, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    /// Dense SPD factorization hit a non-positive pivot.
    #[error("matrix is not positive definite: pivot {pivot} has value {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("consistency check failed: {0}")]
    Consistency(String),

    #[error("frame condition violated: ratio {ratio:e} outside [{lower:e}, {upper:e}]")]
    FrameConditionViolated { ratio: f64, lower: f64, upper: f64 },

    #[error("corrupted data: {0}")]
    Corruption(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, message: msg.into() }
    }

    pub(crate) fn storage(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Storage { path: path.into(), message: msg.into() }
    }
}
