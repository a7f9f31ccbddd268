use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] sngp::Error),
}

impl CliError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 usage, 3 divergence, 4 incompatible metric or model, 5 failed
    /// verification, 1 anything else.
    pub fn exit_code(&self) -> ExitCode {
        let code = match self {
            CliError::Usage(_) => 2,
            CliError::Verification(_) => 5,
            CliError::Io { .. } => 1,
            CliError::Core(e) => core_code(e),
        };
        ExitCode::from(code)
    }
}

fn core_code(e: &sngp::Error) -> u8 {
    match e {
        sngp::Error::Diverged { .. } => 3,
        sngp::Error::Incompatible(_) => 4,
        sngp::Error::InvalidArgument(_) => 2,
        sngp::Error::Member { source, .. } => core_code(source),
        _ => 1,
    }
}
