use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("intersection-over-union undefined: both grids are empty")]
    EmptyUnion,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("malformed binvox data: {0}")]
    Binvox(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Process exit status for the command line: 2 for configuration
    /// problems, 3 for missing inputs, 4 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::StageOrder(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::NonFinite(_) | Error::GradCheck(_) => 4,
            _ => 1,
        }
    }
}
