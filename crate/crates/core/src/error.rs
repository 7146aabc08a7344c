use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("corrupt data in entry `{entry}`: {detail}")]
    Corruption { entry: String, detail: String },

    #[error("transfer failed: {0}")]
    Transfer(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("dataset error in {sequence}: {detail}")]
    Dataset { sequence: String, detail: String },

    #[error("scene spec error: {0}")]
    Spec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
