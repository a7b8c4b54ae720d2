use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed with {} violation(s): {}", .0.len(), summarize(.0))]
    Validation(Vec<String>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("unknown {kind}: {id}")]
    Lookup { kind: &'static str, id: String },

    #[error("{0}")]
    Empty(&'static str),

    #[error("loss diverged (non-finite value {value}) at epoch {epoch}")]
    Divergence { epoch: usize, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

fn summarize(items: &[String]) -> String {
    const SHOWN: usize = 10;
    let mut out = items
        .iter()
        .take(SHOWN)
        .cloned()
        .collect::<Vec<_>>()
        .join("; ");
    if items.len() > SHOWN {
        out.push_str(&format!("; ... and {} more", items.len() - SHOWN));
    }
    out
}
