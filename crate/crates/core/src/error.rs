use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset empty after filtering (min_degree = {min_degree})")]
    DatasetEmpty { min_degree: usize },

    #[error("augmentation budget exceeded: estimated {estimated} edges, budget {budget}")]
    AugmentationBudget { estimated: u64, budget: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value in loss component `{component}`: {value}")]
    NonFinite { component: &'static str, value: f64 },

    #[error("missing teacher weight for edge ({user}, {item})")]
    MissingTeacherWeight { user: usize, item: usize },

    #[error("empty test split: evaluation needs at least one held-out interaction")]
    EmptyTestSplit,

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("stale artifact {path}: config hash {found} does not match expected {expected} (use --force-reuse to keep it)")]
    StaleArtifact {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("artifact directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("{0}")]
    Diverged(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad user input rather than a bug or environment failure.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Shape(_) | Error::MissingTeacherWeight { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
