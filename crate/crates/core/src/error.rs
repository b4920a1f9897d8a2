use alloc::string::String;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph already consumed by a backward pass")]
    GraphConsumed,
    #[error("backward requires a scalar loss, got shape {0}")]
    NotScalar(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("conditioning error: {0}")]
    Conditioning(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
