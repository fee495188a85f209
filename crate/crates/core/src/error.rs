use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions or invalid configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad magic, unsupported version or malformed field in a binary format.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("truncated input: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    /// The sender and receiver do not hold the same codebooks.
    #[error("codebook desync: payload carries hash {remote:#018x}, local codebooks hash to {local:#018x}")]
    CodebookDesync { remote: u64, local: u64 },

    /// An index or parameter block that cannot be produced by a valid encoder.
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    /// Mutation attempted on frozen state.
    #[error("state error: {0}")]
    State(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
