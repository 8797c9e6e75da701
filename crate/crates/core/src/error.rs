use thiserror::Error;

/// Errors produced by the synthesis, certification and experiment layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{field}`: expected {expected}, got {got}")]
    Dimension {
        field: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid weight `{name}`: {reason}")]
    InvalidWeight { name: &'static str, reason: String },

    #[error("invalid disturbance model: {0}")]
    InvalidModel(String),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("shift is only supported for Gaussian disturbance models")]
    UnsupportedShift,

    #[error("non-finite value in `{term}` at the initial point")]
    NonFinite { term: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(field: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Dimension {
        field,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

pub(crate) fn shape(rows: usize, cols: usize) -> String {
    format!("{rows}x{cols}")
}
