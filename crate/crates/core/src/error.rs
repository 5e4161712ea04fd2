use std::fmt;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("budget {budget} outside feasible range [{min}, {max}]")]
    Budget { budget: f64, min: f64, max: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl fmt::Display) -> Self {
        Error::Shape(msg.to_string())
    }

    pub(crate) fn shapes(op: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
    }

    pub(crate) fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }

    pub(crate) fn numerical(msg: impl fmt::Display) -> Self {
        Error::Numerical(msg.to_string())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl fmt::Display) -> Self {
        Error::Config { field: field.into(), message: message.to_string() }
    }

    pub(crate) fn format(offset: u64, message: impl fmt::Display) -> Self {
        Error::Format { offset, message: message.to_string() }
    }
}
