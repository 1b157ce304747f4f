use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("gradient batch contains a non-finite value; statistics left unchanged")]
    NonFiniteGradient,

    #[error("backward called without a recorded training forward pass")]
    NoForwardRecorded,

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dataset is empty")]
    DatasetEmpty,

    #[error("non-finite training loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad magic number in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        what: String,
        expected: u32,
        found: u32,
    },

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("record size mismatch in {path}: {len} bytes is not a multiple of {record}")]
    RecordSizeMismatch {
        path: PathBuf,
        len: usize,
        record: usize,
    },

    #[error("unsupported checkpoint format: {0}")]
    FormatVersionMismatch(String),

    #[error("singular value decomposition did not converge within {max_iterations} iterations")]
    ConvergenceFailure { max_iterations: usize },

    #[error("unknown layer id {0:?}")]
    UnknownLayer(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
