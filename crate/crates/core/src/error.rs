use thiserror::Error;

/// Errors produced by the estimation, simulation and adaptation routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Input failed a structural or numeric check. `field` names the offending
    /// location, e.g. `rollouts[3].entropy_trace`.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input rather than by the environment.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation { .. } | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
