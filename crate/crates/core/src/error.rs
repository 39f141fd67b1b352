use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed record at {path}:{line}: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("could not place {requested} objects without overlap after {attempts} attempts")]
    PlacementFailed { requested: usize, attempts: usize },

    #[error("no template uniquely identifies object {object_id} in scene {scene_id}")]
    Disambiguation { scene_id: String, object_id: u32 },

    #[error("label `{0}` is not in the label vocabulary")]
    UnknownLabel(String),

    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),

    #[error("token id {0} is out of vocabulary range")]
    UnknownTokenId(u32),

    #[error("requested {requested} samples from a set of {available}")]
    TooManySamples { requested: usize, available: usize },

    #[error("box has non-positive size {0:?}")]
    NonPositiveSize([f64; 3]),

    #[error("{gts} ground-truth objects cannot be matched to {queries} queries")]
    TooManyTargets { gts: usize, queries: usize },

    #[error("empty token span")]
    EmptySpan,

    #[error("sequence length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus does not match the model vocabulary: {0}")]
    VocabularyMismatch(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }
}
