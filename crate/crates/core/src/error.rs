use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Every fallible operation in the library funnels
/// through this enum so callers can match on the failure mode instead of
/// parsing strings.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid template: {0}")]
    InvalidTemplate(String),

    #[error("cannot normalize: weights are all zero, negative, or non-finite")]
    DegenerateDistribution,

    #[error("embedding contains non-finite values")]
    NonFiniteEmbedding,

    #[error("example {0} has no label")]
    MissingLabel(u64),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("store file is corrupt: {0}")]
    CorruptStore(String),

    #[error("checkpoint file is corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("k must be at least 1")]
    InvalidK,

    #[error("n_list ({n_list}) exceeds the number of keys ({keys})")]
    TooManyLists { n_list: usize, keys: usize },

    #[error("neighbor list is empty")]
    EmptyNeighborhood,

    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),

    #[error("zero-norm vector has no cosine direction")]
    ZeroNorm,

    #[error("training diverged: loss became non-finite at step {0}")]
    DivergedTraining(usize),

    #[error("Hessian is numerically singular even with damping {0}")]
    SingularHessian(f64),

    #[error("dataset mixes text and feature records (offending record at line {0})")]
    MixedModes(usize),

    #[error("unknown label {label:?} at line {line}")]
    UnknownLabel { label: String, line: usize },

    #[error("label word {0:?} is assigned to more than one class")]
    DuplicateLabelWord(String),

    #[error(
        "{} word(s) missing from the vocabulary, first is {:?} at line {}",
        .0.len(), .0[0].1, .0[0].0
    )]
    UnknownWords(Vec<(usize, String)>),

    #[error("store was loaded from disk without its source corpus; refresh needs the original examples")]
    MissingCorpus,

    #[error("need at least {need} examples, got {got}")]
    CorpusTooSmall { need: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag for each variant, used by the CLI error
    /// records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidTemplate(_) => "invalid_template",
            Error::DegenerateDistribution => "degenerate_distribution",
            Error::NonFiniteEmbedding => "non_finite_embedding",
            Error::MissingLabel(_) => "missing_label",
            Error::EmptyCorpus => "empty_corpus",
            Error::CorruptStore(_) => "corrupt_store",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidK => "invalid_k",
            Error::TooManyLists { .. } => "too_many_lists",
            Error::EmptyNeighborhood => "empty_neighborhood",
            Error::UnknownToken(_) => "unknown_token",
            Error::ZeroNorm => "zero_norm",
            Error::DivergedTraining(_) => "diverged_training",
            Error::SingularHessian(_) => "singular_hessian",
            Error::MixedModes(_) => "mixed_modes",
            Error::UnknownLabel { .. } => "unknown_label",
            Error::DuplicateLabelWord(_) => "duplicate_label_word",
            Error::UnknownWords(_) => "unknown_words",
            Error::MissingCorpus => "missing_corpus",
            Error::CorpusTooSmall { .. } => "corpus_too_small",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
