use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition (shape or dimension mismatch, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed IDX input.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// The dataset cannot satisfy a requested partition.
    #[error("capacity error: class {class} is short by {shortfall} samples")]
    Capacity { class: usize, shortfall: usize },

    /// Local training produced a non-finite parameter.
    #[error("numeric divergence during local training on device {device}{}", round_suffix(*.round))]
    Divergence { device: usize, round: Option<usize> },

    /// A value left the representable range (e.g. a hash that overflows i64).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn round_suffix(round: Option<usize>) -> String {
    match round {
        Some(r) => format!(" in round {r}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a round number to a divergence error raised by local training.
    pub fn in_round(self, round: usize) -> Self {
        match self {
            Error::Divergence { device, .. } => Error::Divergence {
                device,
                round: Some(round),
            },
            other => other,
        }
    }
}
