use thiserror::Error;
use umi_core::UmiError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags or container contents.
    #[error("{0}")]
    Validation(String),
    /// A computation failed to converge or produced no usable result.
    #[error("{0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } => 1,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<UmiError> for CliError {
    fn from(e: UmiError) -> Self {
        match e {
            UmiError::Numerical(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
