use std::io;
use std::path::PathBuf;

use hybridnet_core::model::Variant;

/// Exit code for bad usage, unreadable input data or unwritable outputs.
pub const EXIT_USAGE: i32 = 2;
/// Exit code when training diverges.
pub const EXIT_DIVERGED: i32 = 3;
/// Exit code when a checkpoint is missing, corrupt or of the wrong variant.
pub const EXIT_ARTIFACT: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum HpnError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}: not a {expected} file (magic {found:?})", path.display())]
    BadMagic { path: PathBuf, expected: &'static str, found: String },

    #[error("{}: unsupported {format} version {version}", path.display())]
    UnsupportedVersion { path: PathBuf, format: &'static str, version: u16 },

    #[error("{}: truncated in {what}", path.display())]
    Truncated { path: PathBuf, what: String },

    #[error("{}: header declares {declared} records but the file holds {actual}", path.display())]
    CountMismatch { path: PathBuf, declared: usize, actual: usize },

    #[error("{}: {detail}", path.display())]
    Malformed { path: PathBuf, detail: String },

    #[error("{}: {detail}", path.display())]
    ShapeMismatch { path: PathBuf, detail: String },

    #[error("{}: checkpoint holds a {} network but {} was requested", path.display(), found.name(), expected.name())]
    VariantMismatch { path: PathBuf, expected: Variant, found: Variant },

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] hybridnet_core::Error),

    /// A checkpoint that could not be used, whatever the underlying cause.
    #[error(transparent)]
    Artifact(Box<HpnError>),
}

pub type Result<T> = std::result::Result<T, HpnError>;

impl HpnError {
    pub(crate) fn artifact(self) -> Self {
        match self {
            HpnError::Artifact(_) => self,
            e => HpnError::Artifact(Box::new(e)),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        HpnError::Io { path: path.into(), source }
    }

    /// Process exit code: [`EXIT_ARTIFACT`] for checkpoint problems,
    /// [`EXIT_DIVERGED`] for divergence, [`EXIT_USAGE`] otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HpnError::VariantMismatch { .. } | HpnError::Artifact(_) => EXIT_ARTIFACT,
            HpnError::Core(hybridnet_core::Error::Diverged { .. }) => EXIT_DIVERGED,
            _ => EXIT_USAGE,
        }
    }
}
