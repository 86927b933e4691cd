use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    /// An upstream artifact is missing or no longer matches the manifest.
    #[error("stale artifact: {0}")]
    StaleArtifact(String),

    #[error("output directory is locked by another run ({0}); remove the lock file if no run is active")]
    Locked(PathBuf),

    #[error("acceptance failed: {0}")]
    AcceptanceFailed(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] memgen_core::Error),
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        use memgen_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::StaleArtifact(_) | CliError::Core(E::FingerprintMismatch(_)) => 3,
            CliError::Core(E::BudgetExceeded { .. }) => 4,
            CliError::AcceptanceFailed(_) => 5,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
