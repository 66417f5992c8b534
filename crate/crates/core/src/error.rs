use std::path::PathBuf;

use thiserror::Error;

use crate::ltlm::TrainingReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: magic mismatch at offset {offset}: expected {expected}, found {found}")]
    MagicMismatch {
        path: PathBuf,
        offset: u64,
        expected: String,
        found: String,
    },

    #[error("{path}: unsupported version {found} at offset {offset} (expected {expected})")]
    UnsupportedVersion {
        path: PathBuf,
        offset: u64,
        expected: u32,
        found: u32,
    },

    #[error("count mismatch: {images} images but {labels} labels (offset 4)")]
    CountMismatch { images: u32, labels: u32 },

    #[error("{path}: truncated at offset {offset}: needed {needed} more bytes")]
    Truncated { path: PathBuf, offset: u64, needed: u64 },

    #[error("{path}: invalid header at offset {offset}: {reason}")]
    InvalidHeader { path: PathBuf, offset: u64, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("example {source_index} is not unit-normalized (norm {norm})")]
    NotNormalized { source_index: usize, norm: f64 },

    #[error("theta must lie in (0, 1), got {0}")]
    InvalidTheta(f64),

    #[error("class {0} is not present")]
    MissingClass(u32),

    #[error("at least 3 classes are required, got {0}")]
    TooFewClasses(usize),

    #[error("no class scores to predict from")]
    EmptyScores,

    #[error("no examples of the requested classes")]
    NoExamples,

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("non-finite loss during training (phase {phase}, epoch {epoch})")]
    NonFiniteLoss {
        phase: u8,
        epoch: usize,
        report: Box<TrainingReport>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
