use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    Dimension {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("integration diverged at step {step} (t = {t})")]
    Divergence { step: usize, t: f64 },

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Training { epoch: usize, batch: usize, reason: String },

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("sample generation failed: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
