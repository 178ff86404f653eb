use thiserror::Error;

pub type Result<T> = std::result::Result<T, IsimError>;

#[derive(Error, Debug)]
pub enum IsimError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("loss became non-finite at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },

    #[error("optimizer step past max_steps ({0})")]
    StepOverflow(usize),

    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(String),
}

impl From<image::ImageError> for IsimError {
    fn from(e: image::ImageError) -> Self {
        IsimError::Image(e.to_string())
    }
}

impl IsimError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        IsimError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
