//! Configuration parsing and the `train` / `evaluate` / `export` commands.

pub mod commands;
pub mod config;

use thiserror::Error;

pub use commands::{cmd_evaluate, cmd_export, cmd_train, evaluate_with, train_with_problem};
pub use config::{parse_config, parse_str, RunConfig};

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for runtime failures (divergence, I/O, mismatched checkpoints).
pub const EXIT_RUNTIME: i32 = 1;
/// Exit status for configuration errors.
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config {
        line: Option<usize>,
        message: String,
    },

    #[error("checkpoint does not match config: {field} is {checkpoint} in the checkpoint but {config} in the config")]
    Mismatch {
        field: &'static str,
        checkpoint: String,
        config: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] fbsnn::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Core(fbsnn::Error::Config(_)) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}
