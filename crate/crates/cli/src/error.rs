use std::fmt::Display;

use thiserror::Error;

/// A failed command. User errors (bad config, missing inputs, data that
/// cannot be processed) exit with 1, internal failures with 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{stage}: {message}")]
    User {
        stage: &'static str,
        message: String,
    },
    #[error("{stage}: {message}")]
    Internal {
        stage: &'static str,
        message: String,
    },
}

impl CliError {
    pub fn user(stage: &'static str, message: impl Display) -> Self {
        Self::User {
            stage,
            message: message.to_string(),
        }
    }

    pub fn internal(stage: &'static str, message: impl Display) -> Self {
        Self::Internal {
            stage,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::User { .. } => 1,
            Self::Internal { .. } => 2,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn user_err(self, stage: &'static str) -> Result<T, CliError>;
    fn internal_err(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Display> ResultExt<T> for Result<T, E> {
    fn user_err(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::user(stage, e))
    }

    fn internal_err(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::internal(stage, e))
    }
}
