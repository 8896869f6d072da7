use std::fmt;

use psg_core::Error;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;
pub const EXIT_DIVERGED: i32 = 5;

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(EXIT_INPUT, message)
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self::new(EXIT_MISMATCH, message)
    }

    /// Prefixes the message with what was being attempted.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_)
            | Error::TooFewChannels(_)
            | Error::TooFewPatches(_)
            | Error::NonDivisibleLength { .. }
            | Error::TooFewEpochs { .. }
            | Error::TooFewSubjects { .. } => EXIT_USAGE,
            Error::Io(_) | Error::FormatViolation { .. } | Error::ChecksumMismatch { .. } | Error::InvalidEpoch(_) => EXIT_INPUT,
            Error::ConfigMismatch(_) | Error::LabelModeMismatch(_) | Error::ShapeMismatch(_) | Error::MissingCategory(_) => {
                EXIT_MISMATCH
            }
            Error::DivergenceDetected { .. } | Error::NonFiniteActivation(_) => EXIT_DIVERGED,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_FAILURE, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::new(EXIT_FAILURE, e.to_string())
    }
}
