use thiserror::Error;

/// Errors surfaced to the CLI and HTTP layers, split by who is at fault.
#[derive(Debug, Error)]
pub enum AppError {
    /// bad input from the caller
    #[error("{0}")]
    Validation(String),
    /// failure while doing valid work
    #[error("{0}")]
    Runtime(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 1,
            AppError::Runtime(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AppError::Validation(_) => "validation",
            AppError::Runtime(_) => "runtime",
        }
    }
}

impl From<ttg_core::Error> for AppError {
    fn from(e: ttg_core::Error) -> Self {
        match e {
            ttg_core::Error::Validation(_) => AppError::Validation(e.to_string()),
            _ => AppError::Runtime(e.to_string()),
        }
    }
}

pub fn invalid(msg: impl Into<String>) -> AppError {
    AppError::Validation(msg.into())
}

pub fn runtime(msg: impl Into<String>) -> AppError {
    AppError::Runtime(msg.into())
}

pub type AppResult<T> = Result<T, AppError>;
