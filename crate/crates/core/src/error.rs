use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(String),
    #[error("motion too short: need at least {need} frames, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("token {token} out of range for codebook size {size}")]
    TokenRange { token: u32, size: usize },
    #[error("malformed delayed grid: {0}")]
    MalformedDelay(String),
    #[error("matrix is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
