use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, config, or inputs. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while doing the work. Exit code 3.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(3),
        }
    }

    /// Failure reading or validating an input.
    pub fn input(what: &str, e: impl std::fmt::Display) -> Self {
        CliError::Usage(format!("{what}: {e}"))
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}
