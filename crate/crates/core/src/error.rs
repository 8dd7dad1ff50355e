use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not fit the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A NaN or infinity appeared in a forward or backward pass.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke an API contract (wrong tape node, missing gradient, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid user-facing configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed binary input. `offset` is the byte position where parsing failed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// A value outside its permitted range.
    #[error("range error: {0}")]
    Range(String),

    /// A problem too large for an exhaustive routine.
    #[error("size error: {0}")]
    Size(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse { offset, message: msg.into() }
    }
}
