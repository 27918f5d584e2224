//! Error type shared by all modules.

use thiserror::Error;

/// Unified error for the crate. The CLI maps variants onto stable exit codes.
#[derive(Debug, Error)]
pub enum C3mError {
    /// Tensor shapes or dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value; the message names the offending key.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed dataset or checkpoint bytes; reports the byte offset.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A loss or gradient became non-finite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Evaluation protocol violation (e.g. train/eval identity overlap).
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl C3mError {
    pub fn dim(msg: impl Into<String>) -> Self {
        C3mError::Dim(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        C3mError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        C3mError::Config(msg.into())
    }
}
