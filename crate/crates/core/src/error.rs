use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("duplicate record (frame {frame_id}, detection {detection_idx})")]
    DuplicateRecord { frame_id: u64, detection_idx: u32 },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("batch-size error: {0}")]
    BatchSize(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no positive pairs in mask")]
    EmptyPositive,
    #[error("degenerate feature: row {0} has zero norm")]
    DegenerateFeature(usize),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-parsable category name, used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Length(_) => "length",
            Error::Data(_) => "data",
            Error::Invariant(_) => "invariant",
            Error::DuplicateRecord { .. } => "duplicate-record",
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::BatchSize(_) => "batch-size",
            Error::InsufficientData(_) => "insufficient-data",
            Error::EmptyPositive => "empty-positive",
            Error::DegenerateFeature(_) => "degenerate-feature",
            Error::Coverage(_) => "coverage",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
