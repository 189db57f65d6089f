//! Command implementations behind the `emo` binary.

pub mod args;
pub mod commands;
pub mod config;

use std::process::ExitCode;

/// Failure of a command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    #[error("{0}")]
    Usage(String),
    /// Unreadable or inconsistent data (exit 2).
    #[error("{0}")]
    Data(String),
    /// Non-finite values or failed gradient checks (exit 3).
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        })
    }
}

impl From<emo_core::Error> for CliError {
    fn from(e: emo_core::Error) -> Self {
        use emo_core::Error as E;
        let msg = e.to_string();
        match e {
            E::NonFiniteGradient(_) | E::NonFiniteLoss { .. } => CliError::Numerical(msg),
            E::InvalidArgument(_) | E::Precondition(_) => CliError::Usage(msg),
            E::Shape { .. } | E::NoCache(_) => CliError::Numerical(msg),
            E::NoValidFrames
            | E::ClassOutOfRange { .. }
            | E::Format { .. }
            | E::Data(_)
            | E::Io { .. }
            | E::Json(_) => CliError::Data(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
