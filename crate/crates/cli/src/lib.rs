//! Batch front door for the slate recommendation experiments: configuration
//! parsing, the simulate/train/evaluate pipeline, the beta sweep, and the
//! diagnostic scans. The `slategen` binary wires these to subcommands.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod scans;
pub mod sweep;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent configuration; exits with code 2.
    #[error("config error: {0}")]
    Config(String),
    /// A pipeline stage failed; exits with code 3.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: slategen_core::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } | CliError::Io(_) => 3,
        }
    }
}
