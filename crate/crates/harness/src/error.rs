use sdt_core::SdtError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad input: malformed sequences, specs, configs or arguments.
    #[error("{0}")]
    Validation(String),

    #[error("{path}: {reason}")]
    File { path: PathBuf, reason: String },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tracker(#[from] SdtError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn file(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::File { path: path.into(), reason: reason.into() }
    }

    /// Process exit code: 1 for invalid input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) | Self::File { .. } | Self::Json(_) => 1,
            Self::Tracker(e) => match e {
                SdtError::InvalidBox(_) | SdtError::Config(_) | SdtError::InvalidImage(_) | SdtError::Json(_) => 1,
                _ => 2,
            },
            Self::Image { .. } | Self::Io(_) => 2,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
