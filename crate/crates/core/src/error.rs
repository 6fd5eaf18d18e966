use std::path::PathBuf;

use thiserror::Error;

use crate::descriptor::TraceRow;

/// Errors produced anywhere in the counting stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("point {index} at (row {row}, col {col}) lies outside a {height}x{width} frame")]
    PointOutOfBounds {
        index: usize,
        row: f64,
        col: f64,
        height: usize,
        width: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value in {stage} at iteration {iteration}")]
    NonFinite {
        stage: &'static str,
        iteration: usize,
    },

    #[error("instance too large for exact solve: {size} instances exceeds limit {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        trace: Box<Vec<TraceRow>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
