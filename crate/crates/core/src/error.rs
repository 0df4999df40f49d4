use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cosine similarity is undefined for a zero-norm vector")]
    ZeroNorm,

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("forward cache missing for layer {0}; run a forward pass first")]
    CacheMissing(usize),

    #[error("kernel {kernel} is not supported by {op}")]
    UnsupportedKernel { kernel: String, op: &'static str },

    #[error("backprop baseline does not support grouping or divisive normalization (layer {0})")]
    BackpropGrouping(usize),

    #[error("online circuit state is not initialized: {0}")]
    Uninitialized(&'static str),

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: size {len} is not a multiple of the {record}-byte record size")]
    RecordMisaligned { path: PathBuf, len: usize, record: usize },

    #[error("config: unknown key `{0}`")]
    UnknownKey(String),

    #[error("config: key `{key}` expects {expected}, got `{value}`")]
    TypeMismatch { key: String, expected: &'static str, value: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
