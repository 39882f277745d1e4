use thiserror::Error;

use crate::simulators::SimulatorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Cholesky factorization hit a non-positive (or non-finite) pivot.
    #[error("matrix is not positive definite: pivot {index} is {pivot:e}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("invalid model state: {0}")]
    State(String),

    #[error("latent point has no feasible pre-image in the original box: {0}")]
    InfeasibleLatent(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingFailure { epoch: usize },

    #[error(transparent)]
    Simulator(#[from] SimulatorError),

    #[error("calibration aborted: {0}")]
    Aborted(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
