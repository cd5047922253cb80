use std::path::{Path, PathBuf};

use thiserror::Error;

/// Process exit codes.
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("cannot access {path}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{message}")]
    Numerical { message: String },

    #[error(transparent)]
    Core(#[from] accomp_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> u8 {
        use accomp_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Numerical { .. } => EXIT_NUMERICAL,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(E::Io(_) | E::Corruption(_)) => EXIT_IO,
            CliError::Core(_) => EXIT_USAGE,
        }
    }
}
