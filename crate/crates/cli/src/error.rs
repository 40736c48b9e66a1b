use std::path::PathBuf;

use ftseg_core::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const TRAINING: i32 = 3;
    pub const INCOMPATIBLE: i32 = 4;
    pub const VERIFICATION: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Verification(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Io { .. } => exit::IO,
            CliError::Verification(_) => exit::VERIFICATION,
            CliError::Core(e) => match e {
                Error::InvalidArgument(_) | Error::InvalidConfig(_) => exit::USAGE,
                Error::NonFinite(_) | Error::Diverged { .. } => exit::TRAINING,
                Error::Shape { .. } | Error::Incompatible(_) => exit::INCOMPATIBLE,
                Error::Format { .. } | Error::Io { .. } | Error::Image { .. } | Error::Csv(_) => exit::IO,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
