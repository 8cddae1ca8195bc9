use std::io;

use thiserror::Error;

/// Every failure the library can report, grouped by how a caller should react.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, shape mismatch or out-of-domain parameter.
    #[error("configuration error: {0}")]
    Config(String),
    /// Non-finite value encountered in a numeric kernel.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A caller broke a sequencing contract (e.g. an epoch that did not
    /// cover every example exactly once).
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Slice or subset request outside the valid index range.
    #[error("bounds error: {0}")]
    Bounds(String),
    /// Operation invalid in the current state of a stateful object.
    #[error("state error: {0}")]
    State(String),
    /// Malformed on-disk data.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },
    /// Well-formed data with out-of-range content.
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
