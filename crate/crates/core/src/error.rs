use thiserror::Error;

#[derive(Error, Debug)]
pub enum DaxsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("unsupported document: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DaxsError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(DaxsError::InvalidInput(msg.into()))
}
