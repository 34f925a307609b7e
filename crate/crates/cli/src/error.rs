use std::fmt;

use intra_core::IntraError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Missing or invalid configuration.
    Config,
    /// Unreadable or inconsistent input data.
    Data,
    /// A broken internal invariant.
    Internal,
}

impl ErrorKind {
    pub fn code(self) -> u8 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Internal => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Internal => "internal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Internal,
            message: message.into(),
        }
    }

    pub fn code(&self) -> u8 {
        self.kind.code()
    }

    /// The single machine-parsable line printed on failure.
    pub fn line(&self) -> String {
        let msg = self.message.replace('\n', " ");
        format!(
            "error code={} kind={}: {msg}",
            self.code(),
            self.kind.name()
        )
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<IntraError> for CliError {
    fn from(e: IntraError) -> Self {
        let kind = match &e {
            IntraError::Config(_) | IntraError::InvalidArgument(_) => ErrorKind::Config,
            IntraError::NonFinite(_)
            | IntraError::NonFiniteGradient(_)
            | IntraError::Diverged { .. } => ErrorKind::Internal,
            _ => ErrorKind::Data,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}
