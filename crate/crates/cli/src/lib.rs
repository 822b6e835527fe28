//! Command-line surface of the calibrated self-rewarding lab: run
//! configuration, prompt datasets, end-to-end runs with their artifact
//! tree, and the theory and hallucination reports.

pub mod config;
pub mod dataset;
pub mod report;
pub mod run;

use std::path::PathBuf;

use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed dataset or artifact file.
    #[error("data error: {0}")]
    Data(String),

    #[error("refusing to write into non-empty directory {} (pass --force)", .0.display())]
    Refused(PathBuf),

    #[error(transparent)]
    Runtime(#[from] csr_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const RUNTIME: u8 = 2;
    pub const VERDICT_FALSE: u8 = 3;
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Data(_) | CliError::Refused(_) => exit::USAGE,
            CliError::Runtime(_) | CliError::Io(_) | CliError::Csv(_) => exit::RUNTIME,
        }
    }
}
