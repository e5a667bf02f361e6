//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    #[error("dimension error: {0}")]
    Dim(String),
    /// Invalid configuration (bad hyperparameter, non-divisible grid, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller-side contract was violated (out-of-range label, non-scalar loss, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// Mathematical domain violation (T <= 0, epsilon < 0, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed file (bad magic, truncation, checksum mismatch).
    #[error("format error: {0}")]
    Format(String),
    /// Numerical evaluation failed (non-finite forward value, undefined metric).
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
