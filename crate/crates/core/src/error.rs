use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{what}: expected {expected}, found {found}")]
    Format {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("fit did not converge after {iterations} iterations (relative residual {residual:.4})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("backward called before forward on layer {0}")]
    BackwardBeforeForward(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("missing input artifact: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    /// Stable machine-readable category used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::TomlDe(_) | Error::TomlSer(_) => "config",
            Error::InvalidInput(_) => "invalid_input",
            Error::Shape(_) => "shape",
            Error::Format { .. } | Error::Json(_) => "format",
            Error::NotConverged { .. } => "not_converged",
            Error::BackwardBeforeForward(_) => "state",
            Error::NonFinite(_) => "non_finite",
            Error::MissingInput(_) => "missing_input",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
