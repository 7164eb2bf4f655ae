use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kind}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        kind: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("{kind}: non-finite input")]
    NonFinite { kind: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss([usize; 2]),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("finite difference check: non-finite value at coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("view count mismatch: model expects {expected}, input has {actual}")]
    ViewCountMismatch { expected: usize, actual: usize },

    #[error("invalid caption: {0}")]
    InvalidCaption(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
