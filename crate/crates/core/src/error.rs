use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Everything that can go wrong inside the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("{rows} rows cannot be split into groups of {group_size}")]
    GroupSize { rows: usize, group_size: usize },

    #[error("block {block}: row {row} has a different context than the first row of the block")]
    ContextMismatch { block: usize, row: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("only positive dialogues can be expanded")]
    NegativeDialogue,

    #[error("could not draw a negative different from {response:?} after {attempts} attempts")]
    DegeneratePool { response: String, attempts: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sequence length {len} exceeds max_position {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("vocabulary fingerprint mismatch: model has {expected}, vocabulary has {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("missing weight arrays: {}", .0.join(", "))]
    MissingWeights(alloc::vec::Vec<String>),

    #[error("weight {name}: expected shape {expected:?}, found {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: alloc::vec::Vec<usize>,
        actual: alloc::vec::Vec<usize>,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("training data contains no negative pairs, NSP needs labeled negatives")]
    NoNegatives,

    #[error("all {0} grid-search runs failed")]
    AllRunsFailed(usize),

    #[error("{0}")]
    Observer(String),
}
