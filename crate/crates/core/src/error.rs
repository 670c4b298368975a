use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },

    #[error("{op}: tensor is empty")]
    EmptyTensor { op: &'static str },

    #[error("label {0} is not in {{0, 1}}")]
    InvalidLabel(f64),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("trainable parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("batch has no masked positions")]
    NoMaskedPositions,

    #[error("{0} split is empty")]
    EmptySplit(&'static str),

    #[error("input contains a single class ({0}); need both positives and negatives")]
    SingleClass(&'static str),

    #[error("organ `{0}` is unknown")]
    UnknownOrgan(String),

    #[error("need at least {needed} patients, got {got}")]
    TooFewPatients { needed: usize, got: usize },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input (configs, data files) rather
    /// than failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. }
                | Error::EmptySplit(_)
                | Error::SingleClass(_)
                | Error::UnknownOrgan(_)
                | Error::TooFewPatients { .. }
                | Error::EmptyCorpus
                | Error::Checkpoint(_)
                | Error::Parse(_)
                | Error::Json(_)
                | Error::SequenceTooLong { .. }
                | Error::TokenOutOfRange { .. }
                | Error::InvalidLabel(_)
        )
    }
}
