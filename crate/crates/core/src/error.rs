use std::path::PathBuf;

/// Errors raised by the pose-estimation toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    #[error("point {index:?} lies behind the camera (depth {depth})")]
    BehindCamera { index: Option<usize>, depth: f64 },

    #[error("invalid depth {0}: must be positive")]
    InvalidDepth(f64),

    #[error("points are not collinear (normalized residual {residual:e})")]
    NotCollinear { residual: f64 },

    #[error("duplicate points")]
    DuplicatePoints,

    #[error("coincident points: a distance in the cross-ratio denominator vanished")]
    CoincidentPoints,

    #[error("degenerate box: width and height must be positive")]
    DegenerateBox,

    #[error("empty model point set")]
    EmptyModel,

    #[error("requested {requested} samples from {available} vertices")]
    TooFewVertices { requested: usize, available: usize },

    #[error("invalid value for {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("degenerate PnP configuration: {0}")]
    DegenerateConfiguration(&'static str),

    #[error("RANSAC found no consensus (best inlier count {best})")]
    NoConsensus { best: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("forward cache does not match the current parameters")]
    StaleCache,

    #[error("training diverged at epoch {epoch}")]
    Divergence {
        epoch: usize,
        curve: crate::rotest::TrainingCurve,
    },

    #[error("positional encoding needs an even dimension, got {0}")]
    OddDimension(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty list")]
    EmptyList,

    #[error("pose sampling exhausted after {0} rejections")]
    SamplingExhausted(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
