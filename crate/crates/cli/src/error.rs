use std::io;
use std::path::Path;

use physgrid::ErrorClass;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] physgrid::Error),

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },

    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 0 success, 2 usage, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            },
            CliError::Usage(_) | CliError::Toml(_) => 2,
            CliError::Io { .. } | CliError::Json(_) | CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
