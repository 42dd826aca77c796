use thiserror::Error;

/// Errors raised by the tracking pipeline.
#[derive(Debug, Error)]
pub enum SdtError {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("coordinate mapping error: {0}")]
    Coordinates(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("prior map requires 3 channels, got {0}")]
    GrayscalePrior(usize),

    #[error("singular ridge system; use lambda_s > 0")]
    SingularSystem,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss {loss} at iteration {iteration}; learning rate too high?")]
    Divergence { iteration: usize, loss: f64 },

    #[error("selector has not been trained")]
    UntrainedSelector,

    #[error("empty sample pool")]
    EmptyPool,

    #[error("feature file error for frame {frame}: {reason}")]
    FeatureFile { frame: u32, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SdtError> = std::result::Result<T, E>;
