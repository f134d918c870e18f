use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] gradtail_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("numerical abort in run {run} at step {step}; snapshot written to {}", snapshot.display())]
    Abort { run: String, step: usize, snapshot: PathBuf },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 2 configuration, 3 numerical abort, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        use gradtail_core::Error as E;
        match self {
            CliError::Io { .. } | CliError::Csv { .. } | CliError::Core(E::Io { .. } | E::Csv { .. }) => 4,
            CliError::Abort { .. } | CliError::Core(E::NumericalAbort { .. }) => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
