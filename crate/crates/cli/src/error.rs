use std::process::ExitCode;

use thiserror::Error;

/// Failure of a subcommand, mapped onto a process exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config file: exit 2.
    #[error("config error: {0}")]
    Config(String),
    /// Bad arguments or mismatched inputs: exit 2.
    #[error("{0}")]
    Usage(String),
    /// Training stopped on non-finite values: exit 3.
    #[error("training aborted: {0}")]
    Aborted(String),
    /// A check ran and did not pass: exit 1.
    #[error("{0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] ndgauss::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Core(ndgauss::Error::DimensionMismatch { .. }) => 2,
            CliError::Aborted(_) => 3,
            _ => 1,
        }
    }
}

impl From<CliError> for ExitCode {
    fn from(e: CliError) -> Self {
        ExitCode::from(e.exit_code())
    }
}
