//! Failure classes and their process exit codes.

use std::fmt;

use unitrans_core::Error;

/// Every failure the command line can report. Each class has its own exit
/// code; `0` is success and `1` is reserved for panics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Usage,
    Config,
    Io,
    Checkpoint,
    Contract,
    Training,
    Data,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Usage => 2,
            FailureKind::Config => 3,
            FailureKind::Io => 4,
            FailureKind::Checkpoint => 5,
            FailureKind::Contract => 6,
            FailureKind::Training => 7,
            FailureKind::Data => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FailureKind::Usage => "usage",
            FailureKind::Config => "config",
            FailureKind::Io => "io",
            FailureKind::Checkpoint => "checkpoint",
            FailureKind::Contract => "contract",
            FailureKind::Training => "training",
            FailureKind::Data => "data",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub struct Failure {
    pub kind: FailureKind,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind.name(), self.message)
    }
}

impl Failure {
    pub fn new(kind: FailureKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(FailureKind::Config, message)
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        Self::new(FailureKind::Checkpoint, message)
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new(FailureKind::Io, format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// One-line JSON record for stderr.
    pub fn line(&self) -> String {
        serde_json::json!({
            "error": self.kind.name(),
            "exit_code": self.exit_code(),
            "message": self.message,
        })
        .to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Config(_) => FailureKind::Config,
            Error::Usage(_) => FailureKind::Usage,
            Error::Io { .. } | Error::Parse { .. } => FailureKind::Io,
            Error::ContractViolation(_) => FailureKind::Contract,
            Error::Training { .. } | Error::NonFinite(_) | Error::StaleGradient => FailureKind::Training,
            Error::Shape { .. }
            | Error::Index { .. }
            | Error::EmptyInput(_)
            | Error::UndefinedSimilarity
            | Error::DegenerateProjection(_)
            | Error::Invariant(_) => FailureKind::Data,
        };
        Failure::new(kind, e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;
