use std::path::PathBuf;

/// Errors raised across the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Unknown or wrongly-typed node id.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Operation not allowed in the current state.
    #[error("state error: {0}")]
    State(String),

    /// Malformed serialized record.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Stored data failed its integrity check.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
