use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid date: {0}")]
    InvalidDate(String),

    #[error("field index {index} out of range ({n_fields} fields)")]
    FieldOutOfRange { index: usize, n_fields: usize },

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel count {got} does not match {modality} input (expected {expected})")]
    ChannelMismatch {
        modality: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("date count {dates} does not match acquisition count {acquisitions}")]
    DateCount { dates: usize, acquisitions: usize },

    #[error("empty input sequence")]
    EmptySequence,

    #[error("input sequence has no optical acquisition")]
    NoOptical,

    #[error("sequence has {0} acquisitions, more than the maximum of 8")]
    SequenceTooLong(usize),

    #[error("sample too short after target selection: {0}")]
    SkipSample(String),

    #[error("no valid elements")]
    NoValidElements,

    #[error("nominal level {0} outside (0, 1)")]
    InvalidLevel(f64),

    #[error("step must be at least one day")]
    InvalidStep,

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f32 },

    #[error("bad container {path}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("TOML error in {path}: {message}")]
    Toml { path: PathBuf, message: String },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::NotFound(path);
        }
        Error::Io { path, source }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDate(_) => "invalid_date",
            Error::FieldOutOfRange { .. } => "field_out_of_range",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Shape(_) => "shape",
            Error::ChannelMismatch { .. } => "channel_mismatch",
            Error::DateCount { .. } => "date_count",
            Error::EmptySequence => "empty_sequence",
            Error::NoOptical => "no_optical",
            Error::SequenceTooLong(_) => "sequence_too_long",
            Error::SkipSample(_) => "skip_sample",
            Error::NoValidElements => "no_valid_elements",
            Error::InvalidLevel(_) => "invalid_level",
            Error::InvalidStep => "invalid_step",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Container { .. } => "container",
            Error::NotFound(_) => "not_found",
            Error::Locked(_) => "locked",
            Error::Io { .. } => "io",
            Error::Toml { .. } => "toml",
            Error::Json { .. } => "json",
        }
    }

    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Container { path, .. }
            | Error::NotFound(path)
            | Error::Locked(path)
            | Error::Io { path, .. }
            | Error::Toml { path, .. }
            | Error::Json { path, .. } => Some(path),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
