use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] scat_core::Error),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error("non-finite loss at step {step}: {source}")]
    Diverged { step: usize, source: scat_core::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// 2 for numerical failures, 1 for everything the caller can fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Core(e) if e.is_numerical() => 2,
            HarnessError::CheckFailed(_) | HarnessError::Diverged { .. } => 2,
            _ => 1,
        }
    }
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;
