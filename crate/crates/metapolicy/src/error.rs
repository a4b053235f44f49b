//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or mismatched dimensions between components.
    #[error("configuration error: {0}")]
    Config(String),
    /// A numeric procedure failed (divergence, non-convergence, non-finite values).
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A serialized artifact could not be parsed.
    #[error("format error: {0}")]
    Format(String),
    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
