use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("incomplete attention capture: {0}")]
    IncompleteCapture(String),

    #[error("prompt overflow at {element}: {len} tokens > max_seq_len {max}")]
    Overflow { element: String, len: usize, max: usize },

    #[error("instance {instance_id}: candidate {index} is empty")]
    EmptyCandidate { instance_id: String, index: usize },

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),

    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error("timer resolution insufficient: {0}")]
    TimerResolution(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("instance {instance_id}: {source}")]
    Instance { instance_id: String, source: Box<Error> },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parsable category used by the CLI and the service.
    pub fn category(&self) -> &'static str {
        match self {
            Error::SequenceTooLong { .. } | Error::Overflow { .. } => "overflow",
            Error::InvalidArgument(_)
            | Error::EmptyCandidate { .. }
            | Error::UnknownSymbol(_)
            | Error::DegenerateInstance(_) => "argument",
            Error::Config(_) => "config",
            Error::IncompleteCapture(_) => "capture",
            Error::Generation(_) => "generation",
            Error::Parse { .. } | Error::Json(_) => "parse",
            Error::NonFinite(_) => "numeric",
            Error::TimerResolution(_) => "timer",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Instance { source, .. } => source.category(),
        }
    }

    /// Innermost error, skipping instance annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Instance { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn for_instance(self, instance_id: &str) -> Error {
        match self {
            e @ Error::Instance { .. } => e,
            e => Error::Instance { instance_id: instance_id.to_string(), source: Box::new(e) },
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
