use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode/encode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("missing pair for {path}: {what}")]
    MissingPair { path: PathBuf, what: String },
    #[error("schema error at {path}: {msg}")]
    Schema { path: PathBuf, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    ConfigList(Vec<String>),
    #[error("unsupported geometry: {0}")]
    Geometry(String),
    #[error("cannot inpaint: {0}")]
    CannotInpaint(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("candidate pool exhausted: {0}")]
    PoolExhausted(String),
    #[error("placement rule violation: {0}")]
    RuleViolation(String),
    #[error("placement rejected: {0}")]
    PlacementRejected(String),
    #[error("missing embedding for patch key {0}")]
    MissingEmbedding(String),
    #[error("numeric guard tripped: {0}")]
    Numeric(String),
    #[error("diffusion sampling aborted at step {step} (t={t}): {msg}")]
    SamplingAborted { step: usize, t: usize, msg: String },
    #[error("training diverged at step {step}: loss {loss} > 10x initial {initial}")]
    TrainingDiverged {
        step: usize,
        loss: f64,
        initial: f64,
    },
    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("report comparison error: {0}")]
    ReportMismatch(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn with_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
