use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    #[error("non-finite gradient at {coordinates:?}")]
    NonFiniteGradient { coordinates: Vec<ParamCoord> },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("run {run} produced a zero-norm factor matrix for mode {mode}")]
    DegenerateRun { run: usize, mode: usize },

    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),

    #[error("consensus degenerate: {reason} (silhouette {silhouette:.4})")]
    ConsensusDegeneracy { reason: String, silhouette: f64 },

    #[error("restart {run} failed: {source}")]
    RestartFailed {
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown method `{0}`")]
    UnknownMethod(String),
}

/// Location of a variational parameter inside an SVI state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamCoord {
    Shape { mode: usize, row: usize, col: usize },
    Rate { mode: usize, row: usize, col: usize },
    ZeroInflationMean,
    ZeroInflationScale,
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::NumericalDegeneracy(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NumericalDegeneracy(_)
            | Error::NonFiniteGradient { .. }
            | Error::DegenerateRun { .. }
            | Error::DegenerateClustering(_)
            | Error::ConsensusDegeneracy { .. } => true,
            Error::RestartFailed { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
