use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Core(#[from] maediff_core::Error),
    #[error("non-finite loss {loss} at step {step} (t = {t:?}, patches = {patches:?})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        t: Vec<usize>,
        patches: Vec<usize>,
    },
    #[error("non-finite validation loss at step {0}")]
    NonFiniteValidation(usize),
    #[error("empty {0} set")]
    EmptyDataset(&'static str),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn checkpoint(path: &std::path::Path, msg: impl ToString) -> Self {
        Error::Checkpoint {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    /// True for failures caused by numerics rather than configuration or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. }
                | Error::NonFiniteValidation(_)
                | Error::Core(maediff_core::Error::NonFinite(_))
        )
    }
}
