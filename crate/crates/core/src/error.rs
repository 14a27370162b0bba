use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kind}: incompatible shapes {shapes:?}")]
    Shape {
        kind: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("unknown primitive `{0}`")]
    UnknownOp(String),

    #[error("{kind}: missing attribute `{attr}`")]
    MissingAttr {
        kind: &'static str,
        attr: &'static str,
    },

    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    #[error("empty context set")]
    EmptyContext,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("normalization statistics have not been fitted")]
    NotFitted,

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(kind: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            kind,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
