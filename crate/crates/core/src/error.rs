use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An iterative decomposition did not converge within its iteration cap.
    #[error("numerical failure in {routine}: {detail}")]
    NumericalFailure {
        routine: &'static str,
        detail: String,
    },

    /// A caller broke an operation precondition (shape, length, index).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Integration produced a non-finite state.
    #[error("integration diverged at step {step}")]
    Divergence { step: usize },

    /// Bad configuration (counts, names, budgets, dimension mismatch).
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite loss or network output while training.
    #[error("training diverged in phase {phase} at epoch {epoch}: {detail}")]
    TrainingDivergence {
        phase: String,
        epoch: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numerical(routine: &'static str, detail: impl Into<String>) -> Self {
        Error::NumericalFailure {
            routine,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures that come from the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalFailure { .. } | Error::Divergence { .. } | Error::TrainingDivergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
