use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("fewer than 3 correspondences ({0})")]
    TooFewCorrespondences(usize),

    #[error("degenerate correspondence configuration (collinear or coincident points)")]
    DegenerateConfiguration,

    #[error("registration failed: {0}")]
    RegistrationFailed(String),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("declared dimensions overflow: {0}")]
    DimensionOverflow(String),

    #[error("view count {views} is not K^2 for K = {k}")]
    ViewCount { views: usize, k: usize },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
