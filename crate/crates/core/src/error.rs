use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("variable {0} does not belong to this graph")]
    ForeignVar(usize),

    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),

    #[error("optimizer state count {states} does not match parameter count {params}")]
    StateMismatch { params: usize, states: usize },

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("unknown token {token:?}; vocabulary: [{vocabulary}]")]
    UnknownToken { token: String, vocabulary: String },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("at least one undesired concept is required")]
    NoUndesiredConcepts,

    #[error("concept references were not snapshotted before fine-tuning")]
    MissingRefs,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("timestep {t} out of range for schedule with T = {steps}")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("pretraining corpus is missing combination {0}")]
    MissingCombination(String),

    #[error("unknown fine-tuning method {0:?}")]
    UnknownMethod(String),

    #[error("unknown concept {0:?}")]
    UnknownConcept(String),

    #[error("training failed: {0}")]
    TrainingFailed(String),

    #[error("not enough samples for {metric}: need {needed}, got {got}")]
    InsufficientSamples {
        metric: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checkpoint blob truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("checkpoint fingerprint {found} does not match expected {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("missing {what} at {path}; produce it with `{hint}`")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        hint: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
