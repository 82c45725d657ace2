use thiserror::Error;

/// Errors surfaced by the numerical routines and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("state diverged at t = {t}")]
    Divergence { t: f64 },

    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("step budget of {max_steps} exhausted at t = {t}")]
    MaxSteps { t: f64, max_steps: usize },

    #[error("adjoint pass became unstable at t = {t}: {cause}")]
    AdjointInstability { t: f64, cause: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for the failures a training run records as a "Fail" outcome
    /// instead of aborting.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::StepUnderflow { .. }
                | Error::MaxSteps { .. }
                | Error::AdjointInstability { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
