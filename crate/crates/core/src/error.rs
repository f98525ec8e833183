use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// Each variant maps to a stable numeric code (see [`Error::code`]) that the
/// C interface hands back to foreign callers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid axis {axis} for rank-{rank} tensor in {op}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("function is not deterministic: two evaluations at the same point differ")]
    NonDeterministic,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("payload length mismatch: header implies {expected} bytes, found {found}")]
    PayloadMismatch { expected: usize, found: usize },

    #[error("non-finite voxel value at index {index}")]
    NonFiniteVoxel { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("missing parameter {0:?}")]
    MissingParameter(String),

    #[error("non-finite gradient for parameter {0:?}; step aborted")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable numeric code, shared with the C interface.
    pub fn code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. } => 2,
            Error::InvalidAxis { .. } => 3,
            Error::NonFinite { .. } => 4,
            Error::NonScalarLoss { .. } => 5,
            Error::NonDeterministic => 6,
            Error::BadMagic { .. } => 7,
            Error::Header(_) => 8,
            Error::PayloadMismatch { .. } => 9,
            Error::NonFiniteVoxel { .. } => 10,
            Error::InvalidArgument(_) => 11,
            Error::Config(_) => 12,
            Error::UnknownParameter(_) => 13,
            Error::MissingParameter(_) => 14,
            Error::NonFiniteGradient(_) => 15,
            Error::Diverged { .. } => 16,
            Error::Io { .. } => 17,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
