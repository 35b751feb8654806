//! Crate-wide error type.

use crate::pipeline::PipelineTrace;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("zero-norm embedding vector")]
    ZeroVector,

    #[error("embedding is not unit-norm (|v| = {norm})")]
    NotUnitNorm { norm: f64 },

    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),

    #[error("unknown partition: {topic} / {subtopic}")]
    UnknownPartition { topic: String, subtopic: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("reference answer is empty")]
    EmptyReference,

    #[error("annotated rewrite is empty")]
    EmptyAnnotation,

    #[error("historical embedding list is empty")]
    EmptyHistory,

    #[error("fused reward requires an SSER component when lambda > 0")]
    MissingSser,

    #[error("reward count {count} is not divisible by group size {group}")]
    GroupMismatch { count: usize, group: usize },

    #[error("unresolved template slot: {{{0}}}")]
    UnresolvedSlot(String),

    #[error("malformed client reply: {0}")]
    MalformedReply(String),

    #[error("client transport failure ({}): {message}", if *.retryable { "retryable" } else { "permanent" })]
    Transport { message: String, retryable: bool },

    #[error("store unavailable: {0}")]
    StoreUnavailable(String),

    /// A pipeline stage failed after earlier stages succeeded. Carries the
    /// trace accumulated up to the failing stage for debugging.
    #[error("pipeline stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        trace: Box<PipelineTrace>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when retrying the same call may succeed (transient transport
    /// conditions such as timeouts or 5xx upstream responses).
    pub fn is_retryable(&self) -> bool {
        match self {
            Error::Transport { retryable, .. } => *retryable,
            Error::Stage { source, .. } => source.is_retryable(),
            _ => false,
        }
    }
}
