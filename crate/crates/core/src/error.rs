use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("parent links form a cycle through class {0}")]
    Cycle(usize),

    #[error("class {class} refers to missing parent {parent}")]
    DanglingParent { class: usize, parent: i64 },

    #[error("class {class} sits at level {levels}; hierarchies may have at most {max} levels")]
    TooDeep {
        class: usize,
        levels: usize,
        max: usize,
    },

    #[error("class id {id} out of range for {num_classes} classes")]
    InvalidClass { id: usize, num_classes: usize },

    #[error("invalid annotation: {0}")]
    Annotation(String),

    #[error("every class has zero images")]
    NoPositiveCounts,

    #[error("annotation set is empty")]
    EmptyAnnotations,

    #[error("label set is empty")]
    EmptyLabelSet,

    #[error("numerical domain error: {0}")]
    Numerical(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("epoch {epoch} outside plan of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("non-finite training loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error("predictions and annotations are misaligned: {0}")]
    Misaligned(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::EpochOutOfRange { .. } => ErrorCategory::Config,
            Error::Numerical(_) | Error::NonFiniteLoss { .. } => ErrorCategory::Numerical,
            _ => ErrorCategory::Data,
        }
    }
}
