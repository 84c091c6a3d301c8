use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("matrix of {rows}x{cols} needs {expected} values, got {got}")]
    Length {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("matrix is not positive definite after {retries} regularization retries")]
    NotPositiveDefinite { retries: usize },

    #[error("covariance of mixture component {component} is not positive definite")]
    ComponentNotPositiveDefinite { component: usize },

    #[error("gradient tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("backward requires a 1x1 loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("k = {k} must satisfy 1 <= k < N = {n}")]
    InvalidK { k: usize, n: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("insufficient anomaly pool: need {needed} anomalies, only {available} available")]
    InsufficientAnomalies { needed: usize, available: usize },

    #[error("non-finite loss (recon={recon}, energy={energy}, cov={cov_penalty}, embed={embed_penalty})")]
    NonFiniteLoss {
        recon: f64,
        energy: f64,
        cov_penalty: f64,
        embed_penalty: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
