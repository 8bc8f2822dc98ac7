use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below {eps:e}; cosine similarity is undefined")]
    ZeroVector { eps: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("fusion weight {0} is outside [0, 1]")]
    WeightOutOfRange(f64),

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("encoder failure: {0}")]
    EncoderFailure(String),

    #[error("encoder does not support similarity gradients")]
    GradientsUnsupported,

    #[error("feature surgery unsupported: {0}")]
    SurgeryUnsupported(String),

    #[error("malformed parse tree: {0}")]
    MalformedParse(String),

    #[error("expression is empty after trimming whitespace")]
    EmptyExpression,

    #[error("malformed RLE ({context}): {detail}")]
    MalformedRle { context: String, detail: String },

    #[error("schema error in {}: {detail}", path.display())]
    SchemaError { path: PathBuf, detail: String },

    #[error("no selectable proposal: every candidate is empty or missing")]
    SelectionImpossible,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// `err` followed by each of its causes, colon separated.
pub fn error_chain(err: &dyn std::error::Error) -> String {
    let mut out = err.to_string();
    let mut cur = err.source();
    while let Some(e) = cur {
        out.push_str(": ");
        out.push_str(&e.to_string());
        cur = e.source();
    }
    out
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::SchemaError {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
