use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: config, arguments or CSV schema. Exit code 1.
    #[error("validation error: {0}")]
    Validation(String),
    /// Failure while running or writing results. Exit code 2.
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<perla_core::Error> for CliError {
    fn from(e: perla_core::Error) -> Self {
        match e {
            perla_core::Error::Config(_) | perla_core::Error::Input(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
