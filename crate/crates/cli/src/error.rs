use std::io;
use std::path::PathBuf;

/// Harness failures, grouped by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("incomplete archive: {0}")]
    Incomplete(String),
    #[error("scorer failure: {0}")]
    Scorer(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Core(chainshift_core::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Incomplete(_) => 3,
            HarnessError::Scorer(_) | HarnessError::Core(chainshift_core::Error::Scorer(_)) => 4,
            _ => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        HarnessError::Format(msg.into())
    }
}

impl From<chainshift_core::Error> for HarnessError {
    fn from(e: chainshift_core::Error) -> Self {
        match e {
            chainshift_core::Error::InvalidParam(msg) => HarnessError::Config(msg),
            other => HarnessError::Core(other),
        }
    }
}

/// Attaches a path to IO errors.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| HarnessError::Io { path: path.into(), source })
    }
}
