use refscan_core::store::StoreError;
use thiserror::Error;

/// Process exit codes. These are part of the command-line contract.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const BACKEND: u8 = 3;
    pub const VERIFICATION: u8 = 4;
    pub const MISSING_STAGE: u8 = 5;
    pub const LOCKED: u8 = 6;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("verification error: {0}")]
    Verification(String),
    #[error("stage `{stage}` has not been run: {hint}")]
    MissingStage { stage: &'static str, hint: String },
    #[error("state directory is locked by {0}; remove the lock file if no other refscan process is running")]
    Locked(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Backend(_) => exit::BACKEND,
            CliError::Verification(_) => exit::VERIFICATION,
            CliError::MissingStage { .. } => exit::MISSING_STAGE,
            CliError::Locked(_) => exit::LOCKED,
            CliError::Other(_) => exit::FAILURE,
        }
    }

    pub fn missing(stage: &'static str, hint: impl Into<String>) -> Self {
        CliError::MissingStage {
            stage,
            hint: hint.into(),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Other(e.to_string())
    }
}
