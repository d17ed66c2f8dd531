use std::path::PathBuf;

#[derive(thiserror::Error, Debug)]
pub enum XaiError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing source data: {0}")]
    MissingSource(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("invalid statistics: {0}")]
    InvalidStats(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<XaiError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, XaiError>;

impl XaiError {
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        XaiError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
