use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate attention row {row}: every entry is -inf")]
    DegenerateRow { row: usize },

    #[error("zero-norm column {index}")]
    ZeroNorm { index: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checksum mismatch: manifest says {expected:016x}, blob hashes to {actual:016x}")]
    Checksum { expected: u64, actual: u64 },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("class `{class}` has {found} descriptions, expected {expected}")]
    RaggedClass {
        class: String,
        found: usize,
        expected: usize,
    },

    #[error("embedding dimension mismatch for class `{class}`: {found} vs {expected}")]
    DimMismatch {
        class: String,
        found: usize,
        expected: usize,
    },

    #[error("zero embedding vector for class `{class}` (entry {index})")]
    ZeroVector { class: String, index: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("degenerate affinity supervision: no valid token pairs")]
    DegenerateAffinity,

    #[error("config: {0}")]
    Config(String),

    #[error("config hash {found} does not match existing run {expected}; refusing to resume")]
    ConfigMismatch { expected: String, found: String },

    #[error("training diverged at iteration {iteration}: total loss {loss} (seg {seg}, div {div})")]
    Diverged {
        iteration: usize,
        loss: f64,
        seg: f64,
        div: f64,
    },

    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape { .. }
            | Error::DegenerateRow { .. }
            | Error::ZeroNorm { .. }
            | Error::NonFinite(_)
            | Error::DegenerateAffinity
            | Error::Diverged { .. } => ErrorKind::Numeric,
            Error::Empty(_) | Error::InvalidArgument(_) | Error::Config(_) => ErrorKind::Usage,
            Error::ConfigMismatch { .. } => ErrorKind::Usage,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Error {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
