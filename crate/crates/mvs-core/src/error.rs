//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (counts, ranges, divisibility, missing weights).
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse: mismatched shapes, empty inputs, wrong call order.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed file content. `offset` is the byte position where parsing failed.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn format(path: impl Into<String>, offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
