use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("image `{}`: {reason}", path.display())]
    Image { path: PathBuf, reason: String },

    #[error("image `{}`: unsupported {depth}-bit depth, only 8-bit RGB is accepted", path.display())]
    UnsupportedDepth { path: PathBuf, depth: u8 },

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint: payload size mismatch (manifest needs {expected} bytes, found {found})")]
    PayloadSizeMismatch { expected: usize, found: usize },

    #[error("checkpoint: manifest validation failed: {0}")]
    Manifest(String),

    #[error("no matched pairs")]
    NoMatchedPairs,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
