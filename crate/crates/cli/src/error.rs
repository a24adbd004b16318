use std::io;
use std::path::{Path, PathBuf};

use motif_core::checkpoint::CheckpointError;

/// Process exit codes, one per failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const MISSING_FILE: i32 = 4;
    pub const CHECKPOINT: i32 = 5;
    pub const INCOMPATIBLE: i32 = 6;
    pub const NON_FINITE: i32 = 7;
    pub const DATA: i32 = 8;
    pub const IO: i32 = 9;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },
    #[error("{}: file not found", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] motif_core::Error),
}

impl CliError {
    pub fn file(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    /// Wraps a checkpoint error with the file it came from.
    pub fn checkpoint(path: &Path, err: CheckpointError) -> Self {
        match err {
            CheckpointError::Io(e) => CliError::file(path, e),
            other => CliError::Core(motif_core::Error::Checkpoint(other)),
        }
    }

    pub fn exit_code(&self) -> i32 {
        use motif_core::Error as E;
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Config { .. } => exit::CONFIG,
            CliError::MissingFile(_) => exit::MISSING_FILE,
            CliError::Io { .. } => exit::IO,
            CliError::Core(e) => match e {
                E::Config { .. } => exit::CONFIG,
                E::Checkpoint(CheckpointError::FingerprintMismatch { .. }) | E::Incompatible(_) => exit::INCOMPATIBLE,
                E::Checkpoint(CheckpointError::Io(io)) if io.kind() == io::ErrorKind::NotFound => exit::MISSING_FILE,
                E::Checkpoint(_) => exit::CHECKPOINT,
                E::NonFiniteLoss { .. } | E::NonFiniteGradient(_) => exit::NON_FINITE,
                E::Domain(_)
                | E::Empty(_)
                | E::Integrity(_)
                | E::Json(_)
                | E::Csv(_)
                | E::TokenRange { .. }
                | E::Length { .. } => exit::DATA,
                E::Io(io) if io.kind() == io::ErrorKind::NotFound => exit::MISSING_FILE,
                E::Io(_) => exit::IO,
                _ => exit::INTERNAL,
            },
        }
    }
}
