use std::path::PathBuf;

use mlr::MlrError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` expects {expected}, got `{got}`")]
    TypeMismatch { key: String, expected: String, got: String },
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no usable records in metric log")]
    EmptyLog,
    #[error("{context}: {source}")]
    Run {
        context: String,
        #[source]
        source: MlrError,
    },
    #[error(transparent)]
    Core(#[from] MlrError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("plotting failed: {0}")]
    Plot(String),
}

impl CliError {
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            CliError::UnknownKey(_)
                | CliError::TypeMismatch { .. }
                | CliError::FileNotFound(_)
                | CliError::Parse { .. }
                | CliError::InvalidConfig(_)
        )
    }

    /// Process exit code: 2 for configuration problems, 3 for anything that
    /// fails at run time.
    pub fn exit_code(&self) -> i32 {
        if self.is_config_error() {
            2
        } else {
            3
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for std::result::Result<T, MlrError> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| CliError::Run { context: what(), source })
    }
}
