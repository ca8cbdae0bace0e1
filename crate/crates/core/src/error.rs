use std::io;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid arguments: bad shapes, out-of-range values, violated preconditions.
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced a non-finite or singular result.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Inconsistent configuration (e.g. a loss weight with no backend).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed binary or text input; `offset` is the byte position of the fault.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: msg.into(),
    }
}
