use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer} ({kind}): expected {expected}, got {got}")]
    LayerShape {
        layer: usize,
        kind: &'static str,
        expected: String,
        got: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-differentiable operation `{0}` on the gradient path")]
    NonDifferentiable(&'static str),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("degenerate representation: self-HSIC is zero")]
    DegenerateRepresentation,

    #[error("index {index} out of range for {len} features")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{format}: {message}")]
    Format { format: &'static str, message: String },

    #[error("csv row {row}, column `{column}`: {message}")]
    CsvCell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("version mismatch: expected `{expected}`, found `{found}`")]
    Version { expected: String, found: String },

    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("target coverage {target} unreachable; achievable: {achievable:?}")]
    CoverageUnreachable { target: f64, achievable: Vec<f64> },

    #[error("no significant region in mask")]
    EmptyMask,

    #[error("{0}")]
    Precondition(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            format,
            message: message.into(),
        }
    }
}
