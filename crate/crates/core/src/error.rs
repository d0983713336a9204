use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("steady-state solve did not converge after {iterations} Newton steps (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("bus voltage collapsed to {voltage:.3e} V at bus {bus}")]
    ZeroVoltageCollapse { bus: usize, voltage: f64 },

    #[error("sufficient excitation violated: {0}")]
    SufficientExcitationViolated(String),

    #[error("no excited M-phase sequence set found after {0} attempts")]
    ExcitationNotFound(usize),

    #[error("training epoch needs at least {min} slots, got {got}")]
    TooFewSlots { min: usize, got: usize },

    #[error("channel gain {gain:.3e} towards controller {bus} is too small to demodulate")]
    NearZeroChannel { bus: usize, gain: f64 },

    #[error("covariance approximation outside its validity region: {0}")]
    CovarianceRegion(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("J-SISE did not converge within {iterations} iterations (last step {last_step:.3e})")]
    MaxIterExceeded {
        iterations: usize,
        last_step: f64,
        best: Box<crate::jsise::EstimationResult>,
    },

    #[error("optimal cost is zero, relative cost increase undefined")]
    ZeroCost,

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::ZeroVoltageCollapse { .. }
                | Error::SufficientExcitationViolated(_)
                | Error::ExcitationNotFound(_)
                | Error::NearZeroChannel { .. }
                | Error::CovarianceRegion(_)
                | Error::Singular(_)
                | Error::MaxIterExceeded { .. }
                | Error::ZeroCost
        )
    }
}
