use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer}: {message}")]
    Dimension { layer: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss node must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no differentiable input was registered on this record")]
    InputNotRegistered,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("class tag {tag} outside 1..={classes}")]
    InvalidTag { tag: i32, classes: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("item count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("grids differ: {0}")]
    GridMismatch(String),

    #[error("negative density {value} at cell {cell}")]
    NegativeDensity { cell: usize, value: f64 },

    #[error("no eligible inputs: {0}")]
    NoEligible(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
