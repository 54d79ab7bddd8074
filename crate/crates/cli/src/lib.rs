//! Command implementations behind the `barrier-forge` binary.
//!
//! Each `cmd_*` function returns the process exit code and prints
//! diagnostics to stderr, so tests can drive the commands in-process.

use std::path::{Path, PathBuf};

use barrier_forge::expr::{ExprError, ParseError};
use barrier_forge::ModelError;
use thiserror::Error;

pub mod artifact;
pub mod commands;
pub mod plot;
pub mod problem;

pub use artifact::{Artifact, SynthesisReport};
pub use commands::{
    cmd_export_plot, cmd_simulate, cmd_synthesize, cmd_verify, PlotOptions, SimulateOptions, SynthesizeOptions,
    VerifyOptions,
};
pub use problem::{Problem, ProblemFile};

/// Exit codes shared by all commands.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INPUT: i32 = 1;
    pub const BUDGET: i32 = 2;
    pub const FALSIFIED: i32 = 3;
    pub const INCONCLUSIVE: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("problem file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{field}: {source}")]
    Expr { field: String, source: ParseError },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("evaluation: {0}")]
    Eval(#[from] ExprError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
