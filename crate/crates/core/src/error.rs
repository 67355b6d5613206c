use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("integration blew up at step {step}: {detail}")]
    IntegrationBlowup { step: usize, detail: String },

    #[error("spectrum carries no signal energy")]
    NoSignal,

    #[error("training diverged at iteration {iteration}: {detail}")]
    TrainingDiverged { iteration: usize, detail: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True when the failure is numeric (blow-up, non-finite values) rather than
    /// a malformed request.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteInput(_) | Error::IntegrationBlowup { .. } | Error::NoSignal
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
