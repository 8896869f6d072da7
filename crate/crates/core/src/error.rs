use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("epoch length {length} is not divisible into {n_patch} subsegments")]
    NonDivisibleLength { length: usize, n_patch: usize },
    #[error("at least 2 subsegments are required, got {0}")]
    TooFewPatches(usize),
    #[error("at least 2 channels are required for complementary masks, got {0}")]
    TooFewChannels(usize),
    #[error("channel {0} has fewer than 2 samples")]
    EmptyChannel(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid epoch: {0}")]
    InvalidEpoch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("format violation at byte {offset}: {reason}")]
    FormatViolation { offset: u64, reason: String },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("need at least {needed} epochs, got {got}")]
    TooFewEpochs { needed: usize, got: usize },
    #[error("need at least {needed} subjects, got {got}")]
    TooFewSubjects { needed: usize, got: usize },
    #[error("category {0} has no samples")]
    MissingCategory(usize),
    #[error("row {row} of the probability matrix sums to {sum}")]
    NotStochastic { row: usize, sum: f64 },
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),
    #[error("non-finite loss at step {step}; run aborted")]
    DivergenceDetected {
        step: usize,
        last_good: Option<Box<crate::checkpoint::Checkpoint>>,
    },
    #[error("label mode mismatch: {0}")]
    LabelModeMismatch(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("label {label} outside [0, {k})")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
}

impl Error {
    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::FormatViolation { offset, reason: reason.into() }
    }
}
