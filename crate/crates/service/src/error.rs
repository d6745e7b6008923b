use serde_json::json;
use thiserror::Error;

use nvlab_core::apparatus::ApparatusError;
use nvlab_core::experiment::{ExperimentError, StoreError};

#[derive(Debug, Error)]
pub enum Error {
    #[error("config not found: {0}")]
    ConfigNotFound(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unsupported schema version {found:?}, expected {expected:?}")]
    Schema { found: String, expected: &'static str },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("apparatus busy: {0}")]
    Busy(String),
    #[error("unauthorized")]
    Unauthorized,
    #[error("experiment failed: {0}")]
    Experiment(String),
    #[error("replay mismatch: {0}")]
    Replay(String),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-readable tag.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ConfigNotFound(_) => "config_not_found",
            Error::Config(_) => "config",
            Error::Schema { .. } => "schema",
            Error::Invalid(_) => "invalid",
            Error::NotFound(_) => "not_found",
            Error::Busy(_) => "busy",
            Error::Unauthorized => "unauthorized",
            Error::Experiment(_) => "experiment",
            Error::Replay(_) => "replay_mismatch",
            Error::Io(_) => "io",
        }
    }

    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 1,
            Error::ConfigNotFound(_) | Error::Config(_) => 3,
            Error::Schema { .. } | Error::Invalid(_) => 4,
            Error::NotFound(_) => 5,
            Error::Experiment(_) | Error::Busy(_) | Error::Unauthorized => 6,
            Error::Replay(_) => 7,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "code": self.code(), "message": self.to_string() } })
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<StoreError> for Error {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) => Error::NotFound(format!("dataset {id}")),
            StoreError::Corrupt(m) => Error::Invalid(m),
            other => Error::Io(other.to_string()),
        }
    }
}

impl From<ExperimentError> for Error {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Invalid(m) => Error::Invalid(m),
            ExperimentError::ReplayMismatch(m) => Error::Replay(m),
            ExperimentError::Apparatus(ApparatusError::SessionBusy) => Error::Busy("a job holds the apparatus".into()),
            other => Error::Experiment(other.to_string()),
        }
    }
}

impl From<ApparatusError> for Error {
    fn from(e: ApparatusError) -> Self {
        match e {
            ApparatusError::SessionBusy => Error::Busy("a job holds the apparatus".into()),
            ApparatusError::Replay(m) => Error::Replay(m),
            ApparatusError::InvalidCommand(m) | ApparatusError::Config(m) => Error::Invalid(m),
            other => Error::Experiment(other.to_string()),
        }
    }
}
