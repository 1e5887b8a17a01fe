use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The CLI maps [`Error::Diverged`] to exit code 3 and every other variant
/// to the data-error exit code, so messages are kept to one line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("not a WAV: {0}")]
    NotWav(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("empty audio")]
    EmptyAudio,
    #[error("too short: signal has {len} samples, one window needs {window}")]
    TooShort { len: usize, window: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("fft length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("virtual/no image: distance must exceed focal length (u = {u}, F = {focal})")]
    VirtualImage { u: f64, focal: f64 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("empty corpus: no files matched in {0}")]
    EmptyCorpus(PathBuf),
    #[error("duplicate item_id {0}")]
    DuplicateItem(String),
    #[error("unknown label {0}")]
    UnknownLabel(String),
    #[error("label too small: {label} has {count} items, needs at least {needed}")]
    LabelTooSmall {
        label: String,
        count: usize,
        needed: usize,
    },
    #[error("label mismatch: checkpoint has {expected:?}, manifest has {found:?}")]
    LabelMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("empty confusion matrix")]
    EmptyMatrix,
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("too many failures: {failed} of {total} items failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{} already exists (pass --overwrite to replace)", .0.display())]
    AlreadyExists(PathBuf),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("PNG decode error: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("PNG encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
