use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] dualview_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Self::Format { path: path.into(), message: message.to_string() }
    }

    /// Short category printed in front of the message.
    pub fn category(&self) -> &'static str {
        use dualview_core::Error as E;
        match self {
            Self::Io { .. } => "io",
            Self::Format { .. } => "format",
            Self::Config(_) | Self::Core(E::Config(_)) => "config",
            Self::Checkpoint(_) => "checkpoint",
            Self::Core(E::NonFiniteLoss { .. }) => "training",
            Self::Core(_) => "data",
        }
    }

    /// Process exit code of the category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "io" => 3,
            "format" => 4,
            "config" => 5,
            "data" => 6,
            "training" => 7,
            "checkpoint" => 8,
            _ => 1,
        }
    }
}
