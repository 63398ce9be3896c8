use std::io;
use std::path::PathBuf;

use spinodom_sim::WireError;
use thiserror::Error;

use crate::config::ConfigError;
use crate::eval::EvalError;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_FRAMING: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {}: {source}", path.display())]
    Input { path: PathBuf, source: io::Error },
    #[error("cannot parse {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}: {source}", path.display())]
    Framing { path: PathBuf, source: WireError },
    /// The stream decoded but its packets or blocks do not line up.
    #[error("stream error: {0}")]
    Stream(String),
    #[error("cannot write {}: {source}", path.display())]
    Output { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input { .. } | CliError::Parse { .. } => EXIT_INPUT,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Framing { .. } | CliError::Stream(_) => EXIT_FRAMING,
            CliError::Output { .. } | CliError::Eval(_) | CliError::Other(_) => EXIT_FAILURE,
        }
    }

    /// Value of the `status` key in the metrics document.
    pub fn status(&self) -> &'static str {
        match self {
            CliError::Framing { .. } | CliError::Stream(_) => "framing_error",
            CliError::Input { .. } | CliError::Parse { .. } => "input_error",
            _ => "error",
        }
    }
}
