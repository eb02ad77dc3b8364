//! Error type shared by every module of the simulator.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Array dimensions do not compose.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input outside the domain of an operation (empty batch, bad label, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an API contract, e.g. a stale activation trace.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Malformed binary or text input.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Parameters became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// No generator is available for this class in the current round.
    #[error("recovery unavailable for class {0}")]
    RecoveryUnavailable(usize),

    #[error("partition error: {0}")]
    Partition(String),

    /// Failure inside a simulation round.
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
