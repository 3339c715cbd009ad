use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("tensor rank {0} exceeds the supported maximum of 4")]
    RankTooLarge(usize),

    #[error("non-finite element at flat index {index} produced by {op}")]
    NonFinite { op: &'static str, index: usize },

    #[error("row {row} of a masked softmax has no allowed entries")]
    FullyMaskedRow { row: usize },

    #[error("triangular diagonal entry {index} has magnitude {magnitude:e}, below the floor")]
    SingularDiagonal { index: usize, magnitude: f64 },

    #[error("pivot {index} has magnitude {magnitude:e}, below the floor; matrix is singular")]
    SingularMatrix { index: usize, magnitude: f64 },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("target {target} is outside the vocabulary of size {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },

    #[error("rotary encoding needs an even head dimension, got {0}")]
    OddHeadDim(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("config error{}: {message}", location(.line, .key))]
    Config {
        line: Option<usize>,
        key: Option<String>,
        message: String,
    },

    #[error("corpus has {corpus} bytes, fewer than the {window} needed for one window")]
    CorpusTooSmall { corpus: usize, window: usize },

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn location(line: &Option<usize>, key: &Option<String>) -> String {
    match (line, key) {
        (Some(l), Some(k)) => format!(" at line {l} (key `{k}`)"),
        (Some(l), None) => format!(" at line {l}"),
        (None, Some(k)) => format!(" (key `{k}`)"),
        (None, None) => String::new(),
    }
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
