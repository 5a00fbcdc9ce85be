use std::fmt;
use std::process::ExitCode;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Anything not covered below, e.g. a diverged training run.
    Other = 1,
    /// Missing or unreadable input, malformed files, bad configuration.
    Input = 2,
    /// The estimator could not produce a distance for some objects.
    Estimator = 3,
    /// Some frames failed while the rest were processed.
    PartialFrames = 4,
    /// Command-line usage error.
    Usage = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub class: ErrorClass,
    pub message: String,
}

impl CliError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }

    pub fn input(message: impl fmt::Display) -> Self {
        Self::new(ErrorClass::Input, message.to_string())
    }

    pub fn other(message: impl fmt::Display) -> Self {
        Self::new(ErrorClass::Other, message.to_string())
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.class as u8)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Attaches the input class and a context prefix to any displayable error.
pub trait InputContext<T> {
    fn input_ctx(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T, E: fmt::Display> InputContext<T> for Result<T, E> {
    fn input_ctx(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| CliError::input(format!("{what}: {e}")))
    }
}
