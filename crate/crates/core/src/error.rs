use thiserror::Error;

/// Errors raised anywhere in the embedding, training and retrieval stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("sequence of length {len} is shorter than kernel size {kernel}")]
    SequenceTooShort { len: usize, kernel: usize },
    #[error("{0}: empty sequence")]
    EmptySequence(&'static str),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("{0}: zero-norm vector")]
    DegenerateVector(&'static str),
    #[error("token {token} outside vocabulary of size {vocab}")]
    Vocabulary { token: u32, vocab: usize },
    #[error("{what} = {value} outside {range}")]
    Range {
        what: &'static str,
        value: String,
        range: &'static str,
    },
    #[error("invalid parameter {0}")]
    Parameter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("CTC target of length {target_len} with {repeats} adjacent repeats cannot align to {frames} frames")]
    Infeasible {
        target_len: usize,
        repeats: usize,
        frames: usize,
    },
    #[error("training diverged: non-finite gradient in parameter `{0}`")]
    Divergence(String),
    #[error("learning-rate schedule exhausted: step {step} > total {total}")]
    ScheduleExhausted { step: usize, total: usize },
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSample { needed: usize, got: usize },
    #[error("document {0} has a zero-norm embedding")]
    DegenerateDocument(u32),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("recognizer produced an empty transcript")]
    EmptyTranscript,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn range(what: &'static str, value: impl ToString, range: &'static str) -> Self {
        Error::Range {
            what,
            value: value.to_string(),
            range,
        }
    }
}
