use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The instrument Gram matrix `X'B(B'X)` is numerically singular.
    #[error("rank-deficient instrument Gram matrix (condition {condition:.3e}); deficient covariate columns {columns:?}")]
    RankDeficient { condition: f64, columns: Vec<usize> },

    /// The least-squares normal matrix for phi is singular: the dynamic variables are collinear.
    #[error("coefficients not identified (condition {condition:.3e}); collinear coefficients {coefficients:?}")]
    Identification {
        condition: f64,
        coefficients: Vec<String>,
    },

    #[error("no feasible point: max_t |z_t'phi| = {max_rho:.6}, max_t ||W_t||_inf = {max_w_norm:.6}")]
    Infeasible { max_rho: f64, max_w_norm: f64 },

    #[error("inference error: {0}")]
    Inference(String),

    #[error("data generating process error: {0}")]
    Dgp(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("monte carlo aborted: {failed} of {reps} replications failed")]
    TooManyFailures { failed: usize, reps: usize },

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Read `path` and hand its text to `parse`; failures name the file.
pub(crate) fn with_file<T>(path: &Path, parse: impl FnOnce(&str) -> Result<T>) -> Result<T> {
    std::fs::read_to_string(path)
        .map_err(Error::from)
        .and_then(|text| parse(&text))
        .map_err(|e| Error::File { path: path.to_path_buf(), source: Box::new(e) })
}
