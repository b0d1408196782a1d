use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid contact: {0}")]
    InvalidContact(String),

    #[error(
        "magnet {magnet} is {distance_mm:.6} mm from sensor {sensor}, below the {r_min_mm} mm singularity radius"
    )]
    Singularity {
        magnet: usize,
        sensor: usize,
        distance_mm: f64,
        r_min_mm: f64,
    },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint layer `{layer}` has shape {found:?}, expected {expected:?}")]
    LayerMismatch {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("split leaves the {side} side empty")]
    EmptySplit { side: &'static str },

    #[error("normalization mismatch: {0}")]
    NormalizationMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
