use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sample {sample_id} has no entry for language {code}")]
    MissingTranslation { sample_id: String, code: String },
    #[error("invalid language tag: {0}")]
    InvalidLanguage(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sequence of length {len} exceeds the model's maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("training diverged at step {step}: loss is not finite")]
    DivergedTraining { step: usize },
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("model must be frozen for this operation")]
    ModelNotFrozen,
    #[error("corpus cells are {found}, expected {expected}")]
    CellKindMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("language slice is empty")]
    EmptySlice,
    #[error("sample {0} has fewer than two tokens")]
    DegenerateSample(String),
    #[error("unknown language: {0}")]
    UnknownLanguage(String),
    #[error("language {0} is already present")]
    DuplicateLanguage(String),
    #[error("model hash mismatch: bank was built with {expected}, got {found}")]
    ModelMismatch { expected: String, found: String },
    #[error("unsupported file version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("language representation {0} has zero norm")]
    DegenerateVectors(String),
    #[error("no sample reaches position {0}")]
    EmptyPositionBucket(usize),

    #[error("language representation norm is below epsilon")]
    NoLanguageSignal,
    #[error("target and source representations coincide")]
    DegenerateDirection,
    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("steering mode mismatch: {0}")]
    ModeMismatch(String),
    #[error("language probe is degenerate: held-out accuracy {accuracy:.3} is not above chance {chance:.3}")]
    ProbeDegenerate { accuracy: f64, chance: f64 },
    #[error("need at least {needed} languages, found {found}")]
    InsufficientLanguages { needed: usize, found: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
