use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("dtype mismatch in {op}: {left:?} vs {right:?}")]
    DtypeMismatch { op: &'static str, left: crate::numerics::FloatType, right: crate::numerics::FloatType },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-differentiable point at coordinate {coord}: one-sided slopes {left} and {right} disagree")]
    NonDifferentiable { coord: usize, left: f64, right: f64 },

    #[error("NaN gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("tensor format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpointed block is not deterministic: recomputed output differs from the stored one")]
    RecomputeMismatch,

    #[error("embedding drift between cache passes at row {row}")]
    EmbeddingDrift { row: usize },

    #[error("empty stage-{0} pool")]
    EmptyStream(u8),

    #[error("NaN loss at step {step}; batch ids: {batch_ids:?}")]
    NanLoss { step: u64, batch_ids: Vec<String> },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
