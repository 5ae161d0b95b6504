use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("unknown {kind}: {id}")]
    Lookup { kind: &'static str, id: String },
    #[error("sequence too long: {what} has {len} tokens, limit is {max}")]
    Length {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("bad format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
