//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidOp { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("idx: bad magic {found:#010x} (expected {expected})")]
    IdxMagic { found: u32, expected: &'static str },

    #[error("idx: truncated file, expected {expected} bytes but found {found}")]
    IdxTruncated { expected: usize, found: usize },

    #[error("idx: {found} bytes where the header implies {expected}")]
    IdxTrailing { expected: usize, found: usize },

    #[error("idx: {0}")]
    IdxHeader(String),

    #[error("idx: image count {images} does not match label count {labels}")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("idx: label {label} at index {index} out of range for {n_classes} classes")]
    LabelRange {
        label: usize,
        index: usize,
        n_classes: usize,
    },

    #[error("checkpoint: bad magic {0:?}")]
    CheckpointMagic([u8; 4]),

    #[error("checkpoint: unsupported version {found} (expected {expected})")]
    CheckpointVersion { found: u16, expected: u16 },

    #[error("checkpoint: truncated while reading {0}")]
    CheckpointTruncated(&'static str),

    #[error("checkpoint: tensor {0:?} appears more than once")]
    DuplicateTensor(String),

    #[error("checkpoint: {0}")]
    CheckpointContent(String),

    #[error("report: {0}")]
    Report(String),

    #[error("pixel values must lie in [0, 1]; found {0}")]
    PixelRange(f32),

    #[error("experiment row {row:?}: {source}")]
    Experiment {
        row: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn op(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidOp {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into(),
            source,
        }
    }

    /// True for failures caused by bad user input (configs, files, arguments)
    /// rather than by something going wrong at runtime.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Experiment { source, .. } => source.is_validation(),
            Error::Io { .. } | Error::NonFinite(_) => false,
            _ => true,
        }
    }

    /// Wraps a failure with the experiment row it happened in.
    pub fn in_row(self, row: impl Into<String>) -> Self {
        Error::Experiment {
            row: row.into(),
            source: Box::new(self),
        }
    }
}
