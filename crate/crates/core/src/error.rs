use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid level config: {0}")]
    InvalidLevelConfig(String),

    #[error("could not place start and goal for level seed {seed} after {retries} retries")]
    Placement { seed: u64, retries: u32 },

    #[error("invalid level: {0}")]
    InvalidLevel(String),

    #[error("step called on a finished episode")]
    EpisodeDone,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("runs do not share the same checkpoints: {0}")]
    MismatchedCheckpoints(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
