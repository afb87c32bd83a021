use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes or parameters supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite element at index {index}")]
    NonFinite { index: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A softmax row had every position masked out.
    #[error("row {row} is fully masked")]
    FullyMasked { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Model directory failed validation. `entry` names the manifest entry or file at fault.
    #[error("failed to load model entry `{entry}`: {reason}")]
    Load { entry: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
