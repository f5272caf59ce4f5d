use std::path::PathBuf;

use dualtune_core::Error as CoreError;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Process exit status for a successful command.
pub const EXIT_OK: u8 = 0;
/// Bad input: flags, config, data or checkpoint files.
pub const EXIT_VALIDATION: u8 = 1;
/// The command was well-formed but failed while running.
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{0}")]
    Output(String),

    /// A verification suite reported failures.
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Parse { .. } | CliError::Config { .. } => {
                EXIT_VALIDATION
            }
            CliError::Core(e) => match e {
                CoreError::NonFiniteLoss { .. }
                | CoreError::DegenerateVector { .. }
                | CoreError::NonScalarLoss { .. } => EXIT_RUNTIME,
                _ => EXIT_VALIDATION,
            },
            CliError::Io { .. } | CliError::Output(_) | CliError::Verification(_) => EXIT_RUNTIME,
        }
    }
}
