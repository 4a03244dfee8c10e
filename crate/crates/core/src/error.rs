use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Every masked pixel was dropped while lifting flow; the frame has no
    /// observed dynamic points.
    #[error("gs flow is empty: no masked pixel survived lifting")]
    EmptyFlow,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("optimization diverged: {skipped} of {total} iterations produced non-finite gradients")]
    OptimizationDiverged { skipped: usize, total: usize },

    #[error("invalid scene spec: {0}")]
    SpecValidation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("failed to load {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("frame {frame}, stage {stage}: {source}")]
    Pipeline {
        frame: i64,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn at_stage(self, frame: i64, stage: &'static str) -> Self {
        Error::Pipeline {
            frame,
            stage,
            source: Box::new(self),
        }
    }
}
