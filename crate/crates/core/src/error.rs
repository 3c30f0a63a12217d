use std::path::PathBuf;

/// Errors produced anywhere in the pose pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("refiner trigger not reached: last estimator epoch loss {loss} >= trigger {trigger}")]
    TriggerNotReached { loss: f64, trigger: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Input(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
