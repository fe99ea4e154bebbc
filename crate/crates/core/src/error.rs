use thiserror::Error;

/// Errors produced by the tensor engine, the model and the surrounding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss {value} at iteration {iteration}")]
    NonFiniteLoss { iteration: u64, value: f32 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match architecture at parameter `{name}`: {reason}")]
    ParamMismatch { name: String, reason: String },

    #[error("dataset: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("report: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid_shape(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidShape {
        op,
        reason: reason.into(),
    }
}
