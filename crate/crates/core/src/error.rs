use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by node #{node} ({op}){phase}")]
    NonFinite {
        node: usize,
        op: &'static str,
        phase: &'static str,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("no differentiable path recorded: {0}")]
    NoTape(String),

    #[error("invalid network configuration: {0}")]
    Network(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("label {0} out of range for 7 expression classes")]
    LabelOutOfRange(usize),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("record `{id}` references missing source_id `{source_id}`")]
    DanglingSource { id: String, source_id: String },

    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("parse error at {location}: {detail}")]
    Parse { location: String, detail: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::NonFinite { .. } => "non-finite",
            Error::NotScalar(_) => "not-scalar",
            Error::NoTape(_) => "no-tape",
            Error::Network(_) => "network",
            Error::UnknownParam(_) => "unknown-param",
            Error::LabelOutOfRange(_) => "label-range",
            Error::Corpus(_) | Error::DuplicateId(_) | Error::DanglingSource { .. } => "corpus",
            Error::UnreadableImage { .. } => "image",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Report(_) => "report",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
