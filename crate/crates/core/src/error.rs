use thiserror::Error;

/// Errors produced by the solvers, cost builders, training loop and I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or vector shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value is outside its admissible range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An input lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Iterates of a solver became non-finite.
    #[error("numerical failure at iteration {iteration}: {message}")]
    Numerical { iteration: usize, message: String },

    /// Training aborted because a step produced non-finite values.
    #[error("training failed at step {step}: {message}")]
    Training { step: usize, message: String },

    /// An operation is undefined for the given input (e.g. too few samples).
    #[error("undefined: {0}")]
    Undefined(String),

    /// Malformed input file.
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
