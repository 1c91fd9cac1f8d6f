use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("unknown feature group `{0}`")]
    UnknownGroup(String),

    #[error("id {id} out of range for group `{group}` (cardinality {cardinality})")]
    IdOutOfRange {
        group: String,
        id: u32,
        cardinality: u32,
    },

    #[error("feature selection is empty")]
    EmptySelection,

    #[error("cross feature group `{0}` cannot be used by a two-tower model")]
    CrossFeatureRejected(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("schema digest mismatch: checkpoint has {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("model is untrained (version 0)")]
    Untrained,

    #[error("snapshot version {offered} does not advance current version {current}")]
    StaleSnapshot { current: u64, offered: u64 },

    #[error("malformed dataset line {line}: {reason}")]
    Dataset { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
