use thiserror::Error;

use crate::config::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?} ({op})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("degenerate attention row: every key is masked")]
    DegenerateAttentionRow,

    #[error("rotary embedding requires an even head_dim, got {0}")]
    OddHeadDim(usize),

    #[error("config key `{0}` is missing")]
    MissingKey(String),

    #[error("config key `{key}` must be a positive integer, got {value}")]
    NonInteger { key: String, value: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config document is not a JSON object: {0}")]
    MalformedConfig(String),

    #[error("invalid config: {}", format_violations(.0))]
    InvalidConfig(Vec<Violation>),

    #[error("cache write out of order: expected position {expected}, got {given}")]
    OutOfOrder { expected: usize, given: usize },

    #[error("cache is empty")]
    EmptyCache,

    #[error("cache position {cache_position} is not before chunk start {chunk_start}")]
    CacheAfterChunk {
        cache_position: usize,
        chunk_start: usize,
    },

    #[error("position {position} exceeds context length {context_len}")]
    ContextOverflow { position: usize, context_len: usize },

    #[error("token id {token} out of range for vocab size {vocab_size}")]
    InvalidToken { token: usize, vocab_size: usize },

    #[error("prefill requires a fresh session (next position is {0})")]
    SessionNotFresh(usize),

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("invalid sampler: {0}")]
    InvalidSampler(String),

    #[error("oracle refuses {len} positions x {dim} dims of history (limit {limit} elements)")]
    OracleTooLarge { len: usize, dim: usize, limit: usize },

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.rule())
        .collect::<Vec<_>>()
        .join("; ")
}
