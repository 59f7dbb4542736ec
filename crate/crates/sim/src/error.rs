use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Core(#[from] pfin_core::Error),
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("manifest check failed in {}: {detail}", dir.display())]
    Manifest { dir: PathBuf, detail: String },
    #[error("self-test failed: {0}")]
    Selftest(String),
}

impl SimError {
    /// Stable name of the error class, printed by the CLI.
    pub fn class(&self) -> &'static str {
        match self {
            SimError::Core(pfin_core::Error::Config(_)) | SimError::Validation(_) => "ValidationError",
            SimError::Core(pfin_core::Error::Round { .. }) => "FederationError",
            SimError::Core(_) => "ComputationError",
            SimError::Io { .. } => "IoError",
            SimError::Format { .. } => "FormatError",
            SimError::Manifest { .. } => "ManifestError",
            SimError::Selftest(_) => "SelftestFailure",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.class() {
            "ValidationError" => 2,
            "IoError" => 3,
            "FormatError" => 4,
            "ManifestError" => 5,
            "SelftestFailure" => 6,
            _ => 7,
        }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        SimError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

pub(crate) fn io_at(path: &Path) -> impl FnOnce(io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.to_path_buf(),
        source,
    }
}
