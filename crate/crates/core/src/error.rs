use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input")]
    NonFinite,
    #[error("degenerate embedding")]
    DegenerateEmbedding,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("empty attention row")]
    EmptyAttentionRow,
    #[error("unimodal mask takes no concepts")]
    UnimodalConcepts,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("unknown noun `{0}`")]
    UnknownNoun(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("diverged: non-finite gradient in `{0}`")]
    Diverged(String),
    #[error("frozen parameters changed: {0}")]
    FrozenHashMismatch(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
