use thiserror::Error;

/// Coarse failure classes surfaced to the command line as stable exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Checkpoint,
    Numeric,
}

impl ErrorClass {
    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Config => "ConfigError",
            ErrorClass::Data => "DataError",
            ErrorClass::Checkpoint => "CheckpointError",
            ErrorClass::Numeric => "InternalNumericError",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Checkpoint => 4,
            ErrorClass::Numeric => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalarRoot(Vec<usize>),
    #[error("backward called before forward")]
    ForwardNotRun,
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),

    #[error("invalid schedule range: {0}")]
    InvalidRange(String),
    #[error("step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("step order violated: need t_prev < t, got t={t} t_prev={t_prev}")]
    StepOrderViolation { t: usize, t_prev: usize },
    #[error("requested {steps} sampling steps but schedule has only {max}")]
    StepsExceedT { steps: usize, max: usize },

    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("caption has {words} words but {tags} tags")]
    TagMismatch { words: usize, tags: usize },
    #[error("token id {id} outside vocabulary of {size}")]
    VocabularyOverflow { id: usize, size: usize },
    #[error("attention scale must be non-negative, got {0}")]
    NegativeScale(f64),
    #[error("patch size {patch} does not divide image {h}x{w}")]
    IndivisibleShape { h: usize, w: usize, patch: usize },

    #[error("expert count {n} invalid for {steps} steps")]
    InvalidExpertCount { n: usize, steps: usize },
    #[error("empty batch")]
    EmptyBatch,

    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("checkpoint truncated")]
    TruncatedFile,
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("trajectory was recorded without attention capture")]
    CaptureDisabled,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("{images} images for {specs} scene specs")]
    AlignmentMismatch { images: usize, specs: usize },

    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config(_) | InvalidRange(_) | InvalidExpertCount { .. } | NegativeScale(_)
            | StepsExceedT { .. } | InvalidStep(_) => ErrorClass::Config,
            BadMagic | VersionUnsupported(_) | TruncatedFile | ChecksumMismatch
            | MalformedCheckpoint(_) => ErrorClass::Checkpoint,
            Data(_) | UnknownWord(_) | TagMismatch { .. } | AlignmentMismatch { .. } | Io(_)
            | Json(_) | EmptyBatch => ErrorClass::Data,
            _ => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
