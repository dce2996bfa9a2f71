//! Library side of the `sectune` binary: run configuration, subcommands and
//! report formats.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{
    cmd_eval, cmd_mine, cmd_report, cmd_study, cmd_sweep_sven, cmd_synth, cmd_train, digest,
};
pub use config::{Mode, RunConfig};
pub use report::{EvalReport, ExperimentReport};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation or configuration.
    #[error("{0}")]
    Usage(String),
    /// Unreadable or inconsistent input data.
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] sectune_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
