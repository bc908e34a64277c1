use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("line {line}: eventID {event_id} lacks filiation fields")]
    UnsupportedEventId { line: usize, event_id: String },

    #[error("empty input stream")]
    EmptyStream,

    #[error("unknown node {0}")]
    UnknownNode(String),

    #[error("key {key} out of range (limit {limit})")]
    KeyOutOfRange { key: u32, limit: u32 },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("loss diverged at epoch {epoch} (became non-finite); lower the learning rate")]
    DivergedLoss { epoch: usize },

    #[error("model dimensions do not match: {0}")]
    DimensionMismatch(String),

    #[error("candidate count {t} outside 1..={g}")]
    BadCandidateCount { t: usize, g: usize },

    #[error("prediction and label counts disagree: {predictions} vs {labels}")]
    LabelMismatch { predictions: usize, labels: usize },

    #[error("cannot plant {requested} anomalous tasks, only {available} tasks exist")]
    TooFewTasks { requested: usize, available: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
