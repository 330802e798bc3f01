use thiserror::Error;

/// Errors raised anywhere in the APN stack.
#[derive(Debug, Error)]
pub enum ApnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("label mismatch: transport cost between label {y} and {y0} is infinite")]
    LabelMismatch { y: usize, y0: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("compatibility error: {0}")]
    Compat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ApnError>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::ApnError::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
