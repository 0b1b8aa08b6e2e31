//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad timestamps for query {query_id}: t_s={t_s} must be < t_e={t_e} (duration {duration})")]
    BadTimestamps {
        query_id: String,
        t_s: f64,
        t_e: f64,
        duration: f64,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("similarity matrix is not square: {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("ground-truth index {index} out of range for {len} frames")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite loss in component {component}: {value}")]
    NonFiniteLoss { component: String, value: f64 },

    #[error("gradient mismatch at parameter {path}[{index}]: analytic {analytic}, central diff {numeric}, relative error {rel_err} > tol {tol}")]
    GradMismatch {
        path: String,
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_err: f64,
        tol: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
