use thiserror::Error;

use crate::hpr::SolveReport;

pub type Result<T, E = GgflError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GgflError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// An iterative inner solve stopped before reaching its tolerance.
    #[error("linear solver failed to converge (relative residual {residual:.3e} after {iterations} iterations)")]
    SolverFailure { residual: f64, iterations: usize },

    #[error("factorization failed: {0}")]
    Factorization(String),

    /// The iteration produced non-finite values. Carries the trace up to that point.
    #[error("solver diverged after {} iterations", .0.total_iters)]
    Divergence(Box<SolveReport>),

    #[error("reference oracle inconclusive: {0}")]
    OracleInconclusive(String),

    #[error("tuning failed: {0}")]
    TuningFailed(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GgflError {
    pub(crate) fn mismatch(what: impl Into<String>) -> Self {
        GgflError::DimensionMismatch(what.into())
    }
}
