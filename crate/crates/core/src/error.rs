use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (model shapes, train settings, config files).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller supplied an argument outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?} ({context})")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
        context: String,
    },

    /// A non-finite value surfaced where a finite one is required.
    #[error("numerical error at {location}: value {value}")]
    Numerical { location: String, value: f64 },

    #[error("parameters of frozen model '{0}' cannot receive gradients or updates")]
    Frozen(String),

    /// Malformed file contents. `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(expected: &[usize], actual: &[usize], context: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
