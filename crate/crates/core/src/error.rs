use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("channel mismatch: expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),

    #[error("forward cache does not match the parameters it is used with: {0}")]
    StaleCache(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported file format: {0}")]
    UnsupportedFormat(String),

    #[error("unsupported NIfTI datatype code {0} (expected uint8=2, int16=4 or float32=16)")]
    UnsupportedDatatype(i16),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("payload length mismatch: dims require {expected} bytes, file has {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid label value {0}: labels must be non-negative integers")]
    InvalidLabel(f64),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
