use std::path::{Path, PathBuf};

/// Failures of the command-line layer, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        source: drs_core::Error,
    },
    #[error("{}: not a valid checkpoint: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] drs_core::Error),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_owned(),
            source,
        }
    }

    pub(crate) fn in_file(path: &Path, source: drs_core::Error) -> Self {
        Self::InFile {
            path: path.to_owned(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: &Path, reason: impl ToString) -> Self {
        Self::Checkpoint {
            path: path.to_owned(),
            reason: reason.to_string(),
        }
    }

    /// 1 for usage errors, 3 for aborted training, 2 for everything else (bad or missing data).
    pub fn exit_code(&self) -> i32 {
        use drs_core::Error as E;
        match self {
            Self::Usage(_) | Self::Core(E::InvalidArgument(_) | E::InvalidConfig(_)) => 1,
            Self::Core(E::NonFiniteLoss { .. } | E::AllRunsFailed(_)) => 3,
            _ => 2,
        }
    }
}
