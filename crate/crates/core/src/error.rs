use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpiderError {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("coefficient evaluation failed: {what} at (t={t}, x={x}, l={l})")]
    CoefficientEvaluation {
        what: String,
        t: f64,
        x: f64,
        l: f64,
    },

    #[error("quadrature did not converge: achieved error {achieved:e} > tolerance {tolerance:e}")]
    Quadrature { achieved: f64, tolerance: f64 },

    #[error("linear solve failed on slice (branch {branch}, l-index {l_index}) at time index {t_index}")]
    LinearSolve {
        branch: usize,
        l_index: usize,
        t_index: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SpiderError> = std::result::Result<T, E>;

pub(crate) fn precondition(msg: impl Into<String>) -> SpiderError {
    SpiderError::Precondition(msg.into())
}
