use crate::env::StateId;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty state description")]
    EmptyDescription,

    #[error("numeric state has no coordinates")]
    EmptyState,

    #[error("non-finite state coordinate at index {0}")]
    NonFinite(usize),

    #[error("state has {got} coordinates, embedder expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid prior distribution: {0}")]
    InvalidPrior(String),

    #[error("all posterior weights are zero")]
    ZeroWeights,

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("unknown state {0}")]
    UnknownState(StateId),

    #[error("unknown action `{0}`")]
    UnknownAction(String),

    #[error("provider failure: {0}")]
    Provider(String),

    #[error("provider not adaptable")]
    NotAdaptable,

    #[error("invalid adaptation set: {0}")]
    InvalidAdaptation(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("transition has no continuous component")]
    NoContinuousAction,

    #[error("state {0} missing from {1} map")]
    MissingState(StateId, &'static str),

    #[error("need at least 3 windows, got {0}")]
    TooFewWindows(usize),

    #[error("configuration errors:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
