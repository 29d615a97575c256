use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),
    /// A checkpoint that does not fit the configured model.
    #[error("{0}")]
    Mismatch(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] dpn_core::Error),
    #[error("{0}")]
    CheckFailed(String),
}

pub type Result<T, E = RunError> = std::result::Result<T, E>;

impl RunError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        RunError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Short tag printed as `error[tag]: ...`.
    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Mismatch(_) => "mismatch",
            RunError::Io { .. } => "io",
            RunError::Format(_) => "format",
            RunError::CheckFailed(_) => "check",
            RunError::Core(e) => match e {
                dpn_core::Error::Config(_) => "config",
                dpn_core::Error::Format { .. } => "format",
                dpn_core::Error::NonFinite(_) => "non-finite",
                dpn_core::Error::Contract(_) => "contract",
                dpn_core::Error::ShapeMismatch { .. } | dpn_core::Error::Dimension(_) => "shape",
            },
        }
    }

    /// 2 for configuration problems, 1 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" | "mismatch" => 2,
            _ => 1,
        }
    }

    /// The whole report on one line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.kind(), msg.trim())
    }
}
