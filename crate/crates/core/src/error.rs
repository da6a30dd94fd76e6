use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Units(#[from] UnitError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CaptureError {
    #[error("unknown pcap magic {0:#010x}")]
    BadMagic(u32),
    #[error("capture truncated: {0}")]
    Truncated(String),
    #[error("unsupported link type {0} (only Ethernet is accepted)")]
    UnsupportedLinkType(u32),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("flow store line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum UnitError {
    #[error("unsupported unit width {0} (expected one of 2, 4, 6, 8, 10)")]
    UnsupportedWidth(u32),
    #[error("{segment} segment yields no {bit_width}-bit units")]
    DegenerateSegment { segment: &'static str, bit_width: u32 },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("empty unit sequence")]
    EmptySequence,
    #[error("window size must be at least 2, got {0}")]
    BadWindow(usize),
    #[error(transparent)]
    Units(#[from] UnitError),
    #[error("graph cache: {0}")]
    Cache(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("flow has no packets")]
    EmptyFlow,
    #[error("flow has {0} packets, at most 15 are allowed")]
    FlowTooLong(usize),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("view {0} is not configured in this model")]
    UnknownView(u32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("contrastive batch needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("class {class} has {count} flow(s); stratified split needs at least 2")]
    ClassTooSmall { class: usize, count: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}: {diagnostic}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        diagnostic: String,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
}
