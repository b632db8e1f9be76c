use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("empty file: {0}")]
    EmptyFile(PathBuf),
    #[error("ragged rows: row {row} has {found} columns, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-numeric cell {cell:?} at row {row}, column {column}")]
    NonNumeric {
        row: usize,
        column: usize,
        cell: String,
    },
    #[error("non-finite value at row {row}, column {column}")]
    NonFiniteValue { row: usize, column: usize },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios((f64, f64, f64)),
    #[error("split of length {len} leaves segment {segment} empty")]
    EmptySplit { len: usize, segment: &'static str },
    #[error("series of length {len} yields no windows for t_in={t_in}, t_out={t_out}")]
    NoWindows { len: usize, t_in: usize, t_out: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("probability vector has a non-positive entry at index {0}")]
    ZeroProbability(usize),
    #[error("degenerate trajectory segment: start and target checkpoints coincide")]
    DegenerateSegment,
    #[error("segment span {span} exceeds every trajectory's epoch count")]
    SpanTooLarge { span: usize },
    #[error("divergence: non-finite {0}")]
    Divergence(String),
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    VersionMismatch(u16),
    #[error("truncated file")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
