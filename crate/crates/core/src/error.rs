use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}: degenerate (zero-norm) vector")]
    DegenerateVector(&'static str),

    #[error("parameter `{0}` has no gradient")]
    UninitializedGradient(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus {path} is corrupt: {malformed} of {total} lines malformed")]
    CorpusCorrupt {
        path: PathBuf,
        malformed: usize,
        total: usize,
    },

    #[error("fetch of {entity} failed after {attempts} attempts: {reason}")]
    Fetch {
        entity: String,
        attempts: u32,
        reason: String,
    },

    #[error("sequence of length {len} exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("answer mask selects no positions")]
    EmptyAnswer,

    #[error("prompt has {placeholders} placeholders but {graphs} graphs were supplied")]
    InjectionArity { placeholders: usize, graphs: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("initialization failed: {0}")]
    Init(String),

    #[error("evaluation needs at least one instance")]
    EmptyInstances,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
