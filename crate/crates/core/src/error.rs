use std::path::PathBuf;

use crate::tensor::Shape;

/// Every fallible operation in the crate reports through this type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("{op} requires a scalar, got shape {shape}")]
    NotScalar { op: &'static str, shape: Shape },

    #[error("negative disparity {value} at flat index {index}")]
    NegativeDisparity { index: usize, value: f64 },

    #[error("loss term for branch `{0}` has non-zero weight but the branch was not computed")]
    MissingBranch(&'static str),

    #[error("stage `{stage}` requires `{missing}` to be completed first")]
    StageOrder {
        stage: &'static str,
        missing: &'static str,
    },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed {format} data at byte {offset}: {reason}")]
    Format {
        format: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("missing ground truth for sample `{0}`")]
    MissingGroundTruth(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
