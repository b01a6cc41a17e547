use std::path::PathBuf;

use thiserror::Error;

/// Per-start outcome kept when every multistart fails.
#[derive(Debug, Clone, PartialEq)]
pub struct StartFailure {
    pub start_index: usize,
    pub initial_theta: Vec<f64>,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("empty data")]
    EmptyData,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("correlation matrix not positive definite at pivot {pivot} (theta = {theta:?})")]
    NotPositiveDefinite { theta: Vec<f64>, pivot: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("optimization failed on all {} starts", starts.len())]
    OptimizationFailed { starts: Vec<StartFailure> },

    #[error("lambda selection failed: {0}")]
    Selection(String),

    #[error("malformed dataset {path}: {reason}")]
    MalformedData { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
