use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the localization stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A coordinate or index fell outside the valid extent of a grid or network.
    #[error("{axis} out of range: {value} not in [0, {limit})")]
    Range {
        axis: &'static str,
        value: f64,
        limit: f64,
    },

    /// An argument violated an operation's precondition.
    #[error("invalid value: {0}")]
    Value(String),

    /// A callback returned a value outside its documented contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The pose cell network holds no activity.
    #[error("degenerate belief: pose cell network is empty")]
    DegenerateBelief,

    /// A text or binary input could not be parsed.
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    /// A configuration field is missing or invalid.
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn value(msg: impl Into<String>) -> Self {
        Error::Value(msg.into())
    }

    pub(crate) fn parse(
        source_name: impl Into<String>,
        line: usize,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
