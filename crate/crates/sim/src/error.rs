use serde_json::json;
use thiserror::Error;

use tetherlift_core::SystemState;

#[derive(Debug, Clone, Error)]
pub enum SimError {
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric failure at t = {t} s: {message}")]
    Numeric { t: f64, message: String, last_state: Box<SystemState> },
}

impl SimError {
    /// Process exit code: 1 for scenario or input problems, 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Scenario(_) | Self::Io(_) => 1,
            Self::Numeric { .. } => 2,
        }
    }

    /// One-line JSON description for standard error.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Self::Scenario(m) => json!({"error": "scenario", "message": m}),
            Self::Io(m) => json!({"error": "io", "message": m}),
            Self::Numeric { t, message, last_state } => {
                json!({"error": "numeric", "message": message, "t": t, "last_state": last_state})
            }
        }
    }
}
