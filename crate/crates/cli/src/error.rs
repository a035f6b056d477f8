use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("line {line}, column `{column}`: {message}")]
    Parse { line: u64, column: String, message: String },

    #[error("line {line}: {source}")]
    Row { line: u64, source: tate_core::Error },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{}: {message}", path.display())]
    Config { path: PathBuf, message: String },

    #[error("report: {0}")]
    Report(String),

    #[error(transparent)]
    Core(#[from] tate_core::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}
