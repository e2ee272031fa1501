use thiserror::Error;

/// Errors produced anywhere in the purification toolkit.
#[derive(Error, Debug)]
pub enum BdfwError {
    #[error("non-finite tensor")]
    NonFiniteTensor,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("checkpoint key mismatch: {0}")]
    KeyMismatch(String),

    #[error("empty evaluation set")]
    EmptySet,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<BdfwError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad checkpoint file: {0}")]
    BadCheckpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BdfwError>;

impl BdfwError {
    /// Wrap an error with the name of the pipeline stage that raised it.
    pub fn in_stage(self, stage: &str) -> BdfwError {
        BdfwError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
