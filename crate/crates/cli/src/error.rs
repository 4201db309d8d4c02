use std::path::{Path, PathBuf};

/// Errors surfaced by CLI commands, grouped by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            _ => 1,
        }
    }
}

impl From<maediff_core::Error> for CliError {
    fn from(e: maediff_core::Error) -> Self {
        use maediff_core::Error as E;
        match e {
            E::Config(_) | E::Step { .. } => CliError::Config(e.to_string()),
            E::NonFinite(_) | E::ZeroVariance => CliError::Numeric(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<maediff_model::Error> for CliError {
    fn from(e: maediff_model::Error) -> Self {
        use maediff_model::Error as E;
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            E::Config(_) => CliError::Config(e.to_string()),
            E::Core(inner) => inner.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
