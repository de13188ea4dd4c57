use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at index {index:?}")]
    NonFinite { index: Vec<usize> },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("digest mismatch in {0}")]
    DigestMismatch(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("duplicate task `{0}`")]
    DuplicateTask(String),

    #[error("teacher error: {0}")]
    Teacher(String),

    #[error("frozen parameter: {0}")]
    Frozen(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite { .. } => "non_finite",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::GeometryMismatch(_) => "geometry_mismatch",
            Error::MalformedManifest(_) => "malformed_manifest",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::DigestMismatch(_) => "digest_mismatch",
            Error::UnknownTask(_) => "unknown_task",
            Error::DuplicateTask(_) => "duplicate_task",
            Error::Teacher(_) => "teacher",
            Error::Frozen(_) => "frozen",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
