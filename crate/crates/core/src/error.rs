use std::path::PathBuf;

use i2i_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A rotation parameterization received input it cannot orthonormalize.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("group construction failed: {0}")]
    ConstructionFailure(String),

    #[error("projection has no visible submesh point")]
    EmptyVisibleSet,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("asymmetry guard failed for {class} after {attempts} attempts")]
    AsymmetryGuardFailed { class: String, attempts: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
