//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{msg} at line {line} in {path}")]
    Jsonl {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid channel config: {0}")]
    Channel(String),

    #[error("position {pos} out of range for sequence of length {len}")]
    PositionOutOfRange { pos: usize, len: usize },

    #[error("exact fallibility is unavailable for channels with insertions; use monte_carlo_fallibility")]
    ExactUnavailable,

    #[error("invalid edit script: {0}")]
    InvalidScript(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("span mismatch: {0}")]
    SpanMismatch(String),

    #[error("gradient overflow")]
    GradientOverflow,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty n-best list")]
    EmptyNBest,

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("item {index}: {source}")]
    Item {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_item(index: usize) -> impl FnOnce(Error) -> Error {
        move |source| Error::Item {
            index,
            source: Box::new(source),
        }
    }

    pub fn in_stage(stage: &str) -> impl FnOnce(Error) -> Error + '_ {
        move |source| Error::Stage {
            stage: stage.to_string(),
            source: Box::new(source),
        }
    }

    /// Innermost stage name, if this error arose inside a pipeline stage.
    pub fn stage_name(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, source } => Some(source.stage_name().unwrap_or(stage)),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
