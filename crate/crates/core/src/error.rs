use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("singular value iteration did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("variable was not recorded on this tape")]
    NotOnTape,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient at attack step {step}")]
    NonFiniteGradient { step: usize },

    #[error("constraint violated after attack step {step}: {detail}")]
    Constraint { step: usize, detail: String },

    #[error("finetuning diverged at epoch {epoch}: loss {loss} exceeds 10x initial loss {initial}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },

    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
