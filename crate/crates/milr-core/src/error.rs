use thiserror::Error;

#[derive(Debug, Error)]
pub enum MilrError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dtype mismatch")]
    Dtype,
    #[error("layer {layer}: {msg}")]
    Construction { layer: usize, msg: String },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("recovery not possible: {0}")]
    NoRecovery(String),
    #[error("recovery plan corrupted: {0}")]
    PlanCorrupted(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MilrError>;

impl MilrError {
    pub fn shape(msg: impl Into<String>) -> Self {
        MilrError::Shape(msg.into())
    }
}
