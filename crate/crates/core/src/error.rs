use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NasError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NasError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    /// Non-finite losses or gradients, divergence.
    #[error("training error: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl NasError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NasError::Io {
            path: path.into(),
            source,
        }
    }
}
