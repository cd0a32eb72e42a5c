use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("bad magic in tensor file {}", .0.display())]
    BadMagic(PathBuf),

    #[error("unsupported tensor file version {version} in {}", .path.display())]
    VersionMismatch { path: PathBuf, version: u32 },

    #[error("truncated payload in {}: expected {expected} bytes, found {found}", .path.display())]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("payload length mismatch in {}: expected {expected} bytes, found {found}", .path.display())]
    PayloadMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DType { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("gradient tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("image decode error: {0}")]
    Image(String),

    #[error("io error at {}: {source}", .path.display())]
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

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
