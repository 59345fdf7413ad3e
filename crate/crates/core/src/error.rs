use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate hyperplane: normal vector has zero norm")]
    DegenerateHyperplane,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("episode infeasible: class {class} has {available} samples, needs {required}")]
    EpisodeInfeasible {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable tag, used in the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Contract(_) => "contract",
            Error::DegenerateHyperplane => "degenerate_hyperplane",
            Error::Parse { .. } => "parse",
            Error::EpisodeInfeasible { .. } => "episode_infeasible",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::NonFinite { .. } => "non_finite",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
