use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the matching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("aspect ratio mismatch: {src} vs {dst}")]
    AspectMismatch { src: String, dst: String },

    #[error("cannot upsample from {src} to {dst}")]
    Upsampling { src: String, dst: String },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("input spans no directions (all columns are zero)")]
    EmptySpan,

    #[error("subspace dimension {requested} exceeds the admissible maximum {max}")]
    DimensionTooLarge { requested: usize, max: usize },

    #[error("need at least {required} samples, got {actual}")]
    TooFewSamples { required: usize, actual: usize },

    #[error("data has zero variance")]
    ZeroVariance,

    #[error(
        "degenerate constrained match: subspace dimension {dim} >= low-resolution pixel count {low_dim}; \
         the joint basis fills the ambient space and every similarity is 1"
    )]
    Degenerate { dim: usize, low_dim: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("singular value decomposition did not converge ({0})")]
    NoConvergence(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("label mismatch: {0}")]
    LabelMismatch(String),

    #[error("geometry mismatch in {path}: expected {expected}, found {found}")]
    GeometryMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to choose process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad parameters or configuration.
    Usage,
    /// Missing files, malformed data, I/O.
    Data,
    /// Numerically degenerate input.
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidGeometry(_)
            | Error::AspectMismatch { .. }
            | Error::Upsampling { .. }
            | Error::DimensionTooLarge { .. }
            | Error::InvalidParameter(_) => ErrorKind::Usage,
            Error::RankDeficient(_)
            | Error::EmptySpan
            | Error::ZeroVariance
            | Error::Degenerate { .. }
            | Error::NoConvergence(_) => ErrorKind::Numerical,
            Error::DimensionMismatch { .. }
            | Error::TooFewSamples { .. }
            | Error::LabelMismatch(_)
            | Error::NonFinite(_)
            | Error::GeometryMismatch { .. }
            | Error::Format { .. }
            | Error::UnsupportedFormat(_)
            | Error::Io { .. }
            | Error::Json(_) => ErrorKind::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
