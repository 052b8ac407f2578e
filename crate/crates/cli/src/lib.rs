//! Command-line front end for CompositeNet: configuration handling and the
//! `train`, `detect`, `paramcount`, `eval` and `bench` commands.

pub mod commands;
pub mod config;

use compositenet_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// Process exit code: 2 configuration, 3 divergence, 4 undefined AUC,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(Error::Diverged(_)) => 3,
            CliError::Core(Error::AucUndefined) => 4,
            CliError::Core(Error::InvalidArgument(_) | Error::UnknownShape(_)) => 2,
            _ => 1,
        }
    }
}
