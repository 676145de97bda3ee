use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] alf_core::Error),

    #[error("{stage} stage failed for beta {beta}: {source}")]
    Stage {
        stage: &'static str,
        beta: f64,
        #[source]
        source: alf_core::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no {stage} checkpoint for beta {beta} at {}", path.display())]
    MissingCheckpoint { stage: &'static str, beta: f64, path: PathBuf },

    #[error("{}: row {row}: {message}", path.display())]
    Csv { path: PathBuf, row: usize, message: String },

    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }

    /// Process exit status: 2 for configuration problems, 3 for numeric
    /// aborts, 4 for anything touching files or streams.
    pub fn exit_code(&self) -> u8 {
        use alf_core::Error as E;
        let core = |e: &E| match e {
            E::NonFinite { .. } => 3,
            E::Io(_) | E::Corrupt(_) | E::Format(_) | E::HashMismatch { .. } => 4,
            E::InvalidShape(_) | E::Contract(_) | E::Domain(_) | E::Config(_) => 2,
        };
        match self {
            HarnessError::Core(e) | HarnessError::Stage { source: e, .. } => core(e),
            HarnessError::Config(_) => 2,
            HarnessError::MissingCheckpoint { .. }
            | HarnessError::Csv { .. }
            | HarnessError::Image { .. }
            | HarnessError::Io { .. } => 4,
        }
    }
}
