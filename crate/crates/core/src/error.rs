use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] diffcore::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid mesh: {0}")]
    Mesh(String),
    #[error("image: {0}")]
    Image(String),
    #[error(
        "camera at distance {distance:.3} is inside the mesh bounding sphere (radius {radius:.3})"
    )]
    CameraInsideMesh { distance: f64, radius: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("empty region")]
    EmptyRegion,
    #[error("weights file: {0}")]
    Weights(String),
    #[error("detector training reached AP {ap:.3} < {required:.2} after {epochs} epochs; increase the epoch budget or dataset size")]
    TrainingBudget {
        ap: f64,
        required: f64,
        epochs: usize,
    },
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("undefined ASR: no image is detected on the clean renders")]
    UndefinedAsr,
    #[error("config: {0}")]
    Config(String),
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
