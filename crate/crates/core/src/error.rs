use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CameraError>;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("index out of range: {what} {index} (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("tensor not found: {0}")]
    TensorNotFound(String),

    #[error("non-finite calibration value at row {row}, column {col}")]
    NonFiniteCalibration { row: usize, col: usize },

    #[error("non-finite weight value")]
    NonFiniteWeight,

    #[error("bad container: {0}")]
    BadContainer(String),

    #[error("enumeration guard exceeded: {n} micro-experts (limit {limit}); use the greedy ranking instead")]
    EnumerationGuard { n: usize, limit: usize },

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal ratio {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CameraError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        CameraError::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CameraError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CameraError::InvalidArgument { .. }
                | CameraError::DimensionMismatch { .. }
                | CameraError::IndexOutOfRange { .. }
                | CameraError::EnumerationGuard { .. }
        )
    }
}
