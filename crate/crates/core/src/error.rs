use thiserror::Error;

pub type Result<T> = std::result::Result<T, LopaError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LopaError {
    #[error("token id {token} at position {position} is out of range for vocab size {vocab_size}")]
    TokenOutOfRange {
        position: usize,
        token: u32,
        vocab_size: usize,
    },
    #[error("generation length must be at least 1")]
    EmptyGeneration,
    #[error("vocab size must be at least 1")]
    EmptyVocab,
    #[error("position {0} is outside the sequence")]
    PositionOutOfRange(usize),
    #[error("position {0} is already filled")]
    AlreadyFilled(usize),
    #[error("position {0} is part of the prompt")]
    PromptPosition(usize),
    #[error("nothing is masked")]
    NothingMasked,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("vocab mismatch: model has {model}, state has {state}")]
    VocabMismatch { model: usize, state: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("observed tokens have zero probability under the model")]
    ImpossibleEvidence,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("protocol misuse: {0}")]
    Protocol(String),
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for LopaError {
    fn from(e: std::io::Error) -> Self {
        LopaError::Io(e.to_string())
    }
}
