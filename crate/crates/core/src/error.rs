use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the anomaly-detection pipeline.
#[derive(Debug, Error)]
pub enum CpcError {
    #[error("dataset layout error at {path}: {reason}")]
    DatasetLayout { path: PathBuf, reason: String },

    #[error("anomalous test image {image} has no ground-truth mask (expected {expected})")]
    MissingMask { image: PathBuf, expected: PathBuf },

    #[error("failed to decode image {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("negative bank holds {pool} embeddings but {required} negatives are required")]
    BankTooSmall { pool: usize, required: usize },

    #[error("negative bank source {0} is not a training image")]
    ContaminatedBank(String),

    #[error("score map has no present positions")]
    EmptyScoreMap,

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CpcError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CpcError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input (configs, geometry,
    /// labels) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CpcError::Config(_)
                | CpcError::Geometry(_)
                | CpcError::Shape(_)
                | CpcError::DegenerateLabels(_)
        )
    }
}

pub type Result<T, E = CpcError> = std::result::Result<T, E>;
