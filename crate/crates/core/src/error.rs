use std::path::PathBuf;

use crate::trace::Modality;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("zero-norm vector passed to cosine similarity")]
    ZeroNorm,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("every entry of the softmax input is masked out")]
    AllMasked,

    #[error("empty input")]
    EmptyInput,

    #[error("rope rotation needs an even head dimension, got {0}")]
    OddHeadDim(usize),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("keep count {k} out of range for {n} tokens")]
    KeepCountOutOfRange { k: usize, n: usize },

    #[error("inconsistent schedule: {0}")]
    Schedule(String),

    #[error(
        "infeasible budget: target average {target} is outside the feasible range [{min:.3}, {max:.3}]"
    )]
    InfeasibleBudget { target: f64, min: f64, max: f64 },

    #[error("modality {0:?} is absent from trace `{1}`")]
    ModalityAbsent(Modality, String),

    #[error("instruction spans differ: {0} vs {1} tokens")]
    SpanMismatch(usize, usize),

    #[error("top-{k} requested but only {live} vision tokens are alive")]
    NotEnoughTokens { k: usize, live: usize },

    #[error("no live vision tokens")]
    NoVisionTokens,

    #[error("empty query set for saliency")]
    EmptyQuerySet,

    #[error("layer {layer} has no recorded {what}")]
    MissingLayer { layer: usize, what: &'static str },

    #[error("window [{lo}, {hi}] must span at least 3 layers")]
    WindowTooShort { lo: usize, hi: usize },

    #[error("{}:{line}: {message}", path.display())]
    TraceSchema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
