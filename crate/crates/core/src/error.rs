use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed sidecar {path}: {msg}")]
    MalformedSidecar { path: PathBuf, msg: String },

    #[error("unsupported format version {0:?} (expected \"1\")")]
    UnknownVersion(String),

    #[error("payload length mismatch in {path}: expected {expected} bytes, found {actual}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at index {index}; refusing to serialize")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no texture: frame is constant and cannot be registered")]
    NoTexture,

    #[error("not enough scorable voxels: needed {needed}, found {found}")]
    InsufficientCandidates { needed: usize, found: usize },

    #[error("curve has zero area")]
    ZeroArea,

    #[error("mask is empty")]
    EmptyMask,

    #[error("degenerate system: largest singular value is zero")]
    SingularSystem,

    #[error("zero variance in input series")]
    ZeroVariance,

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { epoch: usize },

    #[error("every case was excluded from the cohort statistics")]
    AllExcluded,

    #[error("csv error in {path}: {msg}")]
    Csv { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
