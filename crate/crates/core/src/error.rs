use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have differing lengths")]
    Ragged,
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid axis for shape {shape:?}")]
    InvalidAxis { op: &'static str, shape: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Invalid(String),
}

/// Errors from the binary feature and checkpoint containers.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),
    #[error("truncated payload: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("annotations line {line}: {message}")]
    Annotation { line: usize, message: String },
    #[error("duplicate video id {0:?}")]
    DuplicateVideo(String),
    #[error("missing annotation for anomaly video {0:?}")]
    MissingAnnotation(String),
    #[error("need at least {needed} {kind} videos, found {found}")]
    Insufficient {
        kind: &'static str,
        needed: usize,
        found: usize,
    },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("feature dimension mismatch for {what}: expected {expected}, found {found}")]
    DimMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("ranking loss needs paired videos: {anomaly} anomaly vs {normal} normal")]
    Unpaired { anomaly: usize, normal: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has no {0} videos")]
    MissingPolarity(&'static str),
    #[error("label {label} out of range for {outputs} outputs")]
    LabelOutOfRange { label: usize, outputs: usize },
    #[error("attention vectors differ in length: {alpha} vs {beta}")]
    LengthMismatch { alpha: usize, beta: usize },
    #[error("invalid loss weight: {0}")]
    InvalidWeight(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
