use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dialogue has no context utterances")]
    EmptyContext,

    #[error("candidate {0} has no tokens")]
    EmptyCandidate(usize),

    #[error("candidate index {index} out of range ({count} candidates)")]
    CandidateIndex { index: usize, count: usize },

    #[error("sequence cannot fit in {max_len} positions even after truncation")]
    SequenceTooLong { max_len: usize },

    #[error("sequence of length {len} exceeds encoder capacity {max_len}")]
    OverlongSequence { len: usize, max_len: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("row {row} of masked softmax has no unmasked entry")]
    DegenerateRow { row: usize },

    #[error("backward already ran on this graph; reset it before reuse")]
    StaleGraph,

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("{path}: header mismatch: {detail}")]
    HeaderMismatch { path: PathBuf, detail: String },

    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("line {line}: {detail}")]
    Schema { line: usize, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
