use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

use crate::config::ConfigError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mist_core::Error),
    #[error(transparent)]
    Checkpoint(#[from] mist_core::backbone::CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Runtime(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Core(mist_core::Error::Config(_)) => EXIT_CONFIG,
            CliError::Verification(_) => EXIT_VERIFICATION,
            _ => EXIT_RUNTIME,
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            EXIT_CONFIG => "config",
            EXIT_VERIFICATION => "verification",
            _ => "runtime",
        }
    }

    /// One-line JSON failure record for stderr.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Failure<'a> {
            kind: &'a str,
            exit_code: i32,
            error: String,
        }
        serde_json::to_string(&Failure {
            kind: self.kind(),
            exit_code: self.exit_code(),
            error: self.to_string(),
        })
        .unwrap_or_else(|_| format!("{{\"error\":{:?}}}", self.to_string()))
    }
}
