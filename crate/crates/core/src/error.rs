//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(f64),

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("value was not produced on this tape")]
    TapeMismatch,

    #[error("no gradient available: tensor does not require grad")]
    MissingGradient,

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("clip of length {len} is shorter than the extractor window {min}")]
    ClipTooShort { len: usize, min: usize },

    #[error("bad magic in {context}: expected {expected:?}, got {got:?}")]
    BadMagic {
        context: &'static str,
        expected: [u8; 4],
        got: [u8; 4],
    },

    #[error("truncated payload while reading {context}")]
    Truncated { context: &'static str },

    #[error("manifest declares {manifest} records but file holds {found}")]
    CountMismatch { manifest: usize, found: usize },

    #[error("unsupported format version: expected {expected}, got {got}")]
    FormatVersion { expected: String, got: String },

    #[error("checkpoint tensor {name}: expected shape {expected:?}, got {got:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("distillation requires a teacher snapshot, none is set")]
    MissingTeacher,

    #[error("UAP pool holds no record with stage index below {stage}")]
    EmptyPool { stage: usize },

    #[error("EER needs at least one score of each class")]
    SingleClass,

    #[error("incomplete run: missing stage artifacts for stages {missing:?}")]
    IncompleteRun { missing: Vec<usize> },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn at_stage(self, stage: usize) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::File { path, source }
    }

    /// True for errors that signal bad user input rather than an internal failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::File { .. })
    }
}
