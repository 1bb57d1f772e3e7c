//! Library side of the `ocnet` command: config parsing, checkpoints and the
//! subcommand implementations, so tests can drive them without a process.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod visualize;

use std::path::PathBuf;

pub use checkpoint::Checkpoint;
pub use config::{ConfigError, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad command-line usage: exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Config { path: PathBuf, source: ConfigError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] ocnet_core::Error),
}

impl CliError {
    /// 2 for usage and config mistakes, 1 for everything that failed at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Checkpoint(_) | CliError::Core(_) => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
