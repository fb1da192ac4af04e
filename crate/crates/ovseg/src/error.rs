use std::io;
use std::path::{Path, PathBuf};

/// Failures of the command-line front end, each mapped to a stable exit
/// status by [`CliError::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}:{line}:{column}: {message}", path.display())]
    ConfigSyntax { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint does not fit the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] ovseg_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

/// Exit status on success.
pub const EXIT_OK: u8 = 0;
/// A named input is missing, unreadable or not in the expected format.
pub const EXIT_INPUT: u8 = 1;
/// Invalid configuration, arguments or file pairing.
pub const EXIT_INVALID: u8 = 2;
/// Training stopped on a non-finite loss.
pub const EXIT_NON_FINITE: u8 = 3;
/// Checkpoint tensors do not fit the configured model.
pub const EXIT_MISMATCH: u8 = 4;

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        CliError::Format { path: path.to_path_buf(), message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Format { .. } => EXIT_INPUT,
            CliError::ConfigSyntax { .. } | CliError::Invalid(_) => EXIT_INVALID,
            CliError::Mismatch(_) => EXIT_MISMATCH,
            CliError::Core(ovseg_core::Error::NonFiniteLoss { .. }) => EXIT_NON_FINITE,
            CliError::Core(_) => EXIT_INVALID,
        }
    }
}

pub(crate) fn invalid(message: impl Into<String>) -> CliError {
    CliError::Invalid(message.into())
}
