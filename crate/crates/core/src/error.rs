use thiserror::Error;

/// Errors surfaced by the identification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation contract (dimension mismatch,
    /// non-finite input, empty grid, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The adaptive integrator could not continue (step-size underflow,
    /// typically a stiff blow-up of the candidate model).
    #[error("integration failed at t = {last_time}: {reason}")]
    IntegrationFailure { last_time: f64, reason: String },

    /// An unknown system or noise-family name was requested.
    #[error("unknown preset: {0}")]
    UnknownPreset(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
