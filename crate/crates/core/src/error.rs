use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes or layouts that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity showed up where a finite value is required.
    #[error("numeric error at {location}: {detail}")]
    Numeric { location: String, detail: String },

    /// Caller supplied a value that violates a documented precondition.
    #[error("input error in `{field}`: {detail}")]
    Input { field: String, detail: String },

    /// The model itself is unusable (non-ergodic chain, coverage gaps, ...).
    #[error("model error: {0}")]
    Model(String),

    /// Operation not valid in the current state (e.g. sampling an empty buffer).
    #[error("state error: {0}")]
    State(String),

    /// Text or binary format could not be parsed.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// Two computation routes that must agree did not.
    #[error("internal consistency failure: {0}")]
    Inconsistent(String),

    /// A binary snapshot is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub fn input(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Input {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
