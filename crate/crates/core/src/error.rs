use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {time} lies outside [0, 1]")]
    Domain { time: f64 },

    #[error("derivative order {order} exceeds spline degree {degree}")]
    InvalidOrder { order: usize, degree: usize },

    #[error("ill-conditioned basis: {0}")]
    IllConditionedBasis(String),

    #[error("invalid basis configuration: {0}")]
    InvalidBasis(String),

    #[error("numerically singular covariance for subject {subject}")]
    NumericalSingularity { subject: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("design matrix is rank deficient (dependent columns: {columns:?})")]
    DesignRank { columns: Vec<usize> },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{path}:{line}: {message}")]
    Data {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("subject {subject}: {source}")]
    Subject {
        subject: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Broad failure classes, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Validation,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Csv { source, .. } if source.is_io_error() => ErrorClass::Io,
            Error::NumericalSingularity { .. } | Error::IllConditionedBasis(_) => {
                ErrorClass::Numerical
            }
            Error::Subject { source, .. } | Error::Iteration { source, .. } => source.class(),
            _ => ErrorClass::Validation,
        }
    }

    pub(crate) fn for_subject(self, subject: usize) -> Error {
        match self {
            Error::NumericalSingularity { .. } => Error::NumericalSingularity { subject },
            e @ Error::Subject { .. } => e,
            other => Error::Subject {
                subject,
                source: Box::new(other),
            },
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }
}
