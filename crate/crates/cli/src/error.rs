use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Core(ehrsig_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Numerical(_) => 4,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

impl From<ehrsig_core::Error> for CliError {
    fn from(e: ehrsig_core::Error) -> Self {
        use ehrsig_core::Error as E;
        match e {
            E::Numerical(m) => CliError::Numerical(m),
            E::RankDeficient { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
