//! Error type shared across the crate. Shape and format problems carry enough
//! context (dimensions, offsets, file positions) to be actionable without a
//! debugger.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument in {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("batch norm statistics are uninitialized: run at least one training-mode forward pass (or load a trained model) before inference")]
    UninitializedStatistics,

    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("format error in {what} at byte offset {offset}: {detail}")]
    Format {
        what: String,
        offset: usize,
        detail: String,
    },

    #[error("ground truth pixel at (row {row}, col {col}) has color ({r}, {g}, {b}); expected pure green (0,255,0), white (255,255,255) or black (0,0,0)")]
    BadGroundTruthColor {
        row: usize,
        col: usize,
        r: u8,
        g: u8,
        b: u8,
    },

    #[error("could not place {what} after {attempts} attempts; scene is over-packed (reduce crown count or radii, or enlarge the image)")]
    ScenePacking { what: &'static str, attempts: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
