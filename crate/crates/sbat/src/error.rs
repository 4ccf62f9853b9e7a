use std::path::Path;

use sbat_core::Error as CoreError;

/// Failures surfaced by commands, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad user input, files or configuration (exit code 2).
    #[error("{0}")]
    Input(String),
    /// An internal invariant broke (exit code 3).
    #[error("{0}")]
    Contract(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Contract(_) => 3,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CliError::Contract(msg.into())
    }

    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Input(format!("{}: {err}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Input(_) | CoreError::Config(_) => CliError::Input(e.to_string()),
            _ => CliError::Contract(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
