use thiserror::Error;

/// Errors raised by every layer of the stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("config error: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("non-finite values in {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
