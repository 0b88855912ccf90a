use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {field}: {msg}")]
    Record { line: usize, field: String, msg: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error("windowing: {0}")]
    Window(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {scores} scores vs {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

/// Umbrella error for the training / evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr = {lr})")]
    NonFinite { epoch: usize, batch: usize, lr: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
