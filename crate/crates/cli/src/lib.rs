//! Library surface of the `privfilter` binary: argument definitions, command
//! implementations, the toy-data generator, and the naive-oracle audit.

pub mod args;
pub mod audit;
pub mod commands;
pub mod output;
pub mod toy;

use thiserror::Error;

/// Failure classes, each with its own exit code so batch drivers can tell
/// ingest problems from training, calibration, and evaluation failures.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("ingest: {0}")]
    Ingest(String),
    #[error("train: {0}")]
    Train(String),
    #[error("calibrate: {0}")]
    Calibrate(String),
    #[error("evaluate: {0}")]
    Evaluate(String),
    #[error("audit: {0}")]
    AuditFailed(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Ingest(_) => 3,
            CliError::Train(_) => 4,
            CliError::Calibrate(_) => 5,
            CliError::Evaluate(_) => 6,
            CliError::AuditFailed(_) => 7,
        }
    }
}

/// Render an error with its source chain on one line.
pub fn render_error(err: &dyn std::error::Error) -> String {
    let mut out = err.to_string();
    let mut source = err.source();
    while let Some(e) = source {
        out.push_str(": ");
        out.push_str(&e.to_string());
        source = e.source();
    }
    out
}
