use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("misconfiguration: {0}")]
    Misconfiguration(String),

    #[error("integration failure at step {step}: Newton did not converge (residual {residual:e})")]
    IntegrationFailure { step: usize, residual: f64 },

    #[error("simulation diverged at sample {index}")]
    Divergence { index: usize },

    #[error("invalid model order {0}")]
    InvalidOrder(usize),

    #[error("order {order} too high for the available data (numerical rank {rank})")]
    OrderTooHigh { order: usize, rank: usize },

    #[error("model is unstable (spectral radius {0})")]
    Unstable(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub(crate) fn misconfig(msg: impl Into<String>) -> Error {
    Error::Misconfiguration(msg.into())
}
