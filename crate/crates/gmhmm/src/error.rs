use crate::model::Validation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("covariance is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("observation sequence is empty")]
    EmptySequence,

    #[error("need at least {required} observations, found {actual}")]
    InsufficientData { required: usize, actual: usize },

    #[error("scale vector length {found} does not match sequence length {expected}")]
    ScaleLengthMismatch { expected: usize, found: usize },

    /// A regime received (numerically) zero posterior mass during re-estimation.
    /// `state` is 1-based to match user-facing regime numbering.
    #[error("starved state {state}: total occupancy below 1e-12; re-initialize with \
             different starting parameters, fewer mixture components, or more data")]
    StarvedState { state: usize },

    #[error("EM monotonicity violated at iteration {iteration}: log-likelihood fell \
             from {previous} to {current}")]
    MonotonicityViolated {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("transition matrix has no strictly positive stationary distribution \
             (chain is reducible or degenerate)")]
    NoStationaryDistribution,

    #[error("invalid model:\n{0}")]
    InvalidModel(Validation),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
