//! Configuration, dispatch and artifact emission for the `wtransport` binary.

pub mod config;
pub mod output;
pub mod run;

use thiserror::Error;

/// Failure modes of a run, each with a fixed exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(#[from] wtransport_core::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checks failed: {}", .0.join(", "))]
    CheckFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) | CliError::Io(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}
