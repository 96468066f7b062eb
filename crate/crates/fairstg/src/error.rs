use std::path::PathBuf;

use thiserror::Error;

/// Failure of a command, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Training(_) => 4,
            Self::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<fairstg_core::Error> for CliError {
    fn from(e: fairstg_core::Error) -> Self {
        use fairstg_core::Error as E;
        match e {
            E::Config(_) | E::Parameter(_) => Self::Config(e.to_string()),
            E::NonFiniteLoss { .. } => Self::Training(e.to_string()),
            E::Shape { .. } | E::Validation(_) | E::EmptyDataset { .. } | E::DegenerateStd => {
                Self::Data(e.to_string())
            }
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
