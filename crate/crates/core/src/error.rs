use std::path::PathBuf;
use std::time::Duration;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: line {line}: {reason}", path.display())]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{}: empty dataset", .0.display())]
    EmptyDataset(PathBuf),

    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("task `{task_id}` instance {index} has no response")]
    MissingResponse { task_id: String, index: usize },

    #[error("non-contiguous stage: expected {expected}, got {got}")]
    NonContiguousStage { expected: u32, got: u32 },

    #[error("registry: {0}")]
    Registry(String),

    #[error("expert `{expert_id}` failed: {source}")]
    Expert {
        expert_id: String,
        #[source]
        source: TransportError,
    },

    #[error("base model failed: {0}")]
    Base(#[source] TransportError),

    #[error("score matrix: {0}")]
    Matrix(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// Failure talking to a completion backend. Kept separate from an expert
/// that answered without an indicator.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{target}: {kind}")]
pub struct TransportError {
    /// Model or expert the request was addressed to.
    pub target: String,
    pub kind: TransportErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportErrorKind {
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("protocol: {0}")]
    Protocol(String),
}

impl TransportError {
    pub fn new(target: impl Into<String>, kind: TransportErrorKind) -> Self {
        Self {
            target: target.into(),
            kind,
        }
    }
}
