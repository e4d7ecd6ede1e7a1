use std::path::PathBuf;

/// Command failures, grouped by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration at `{key}`: {message}")]
    Validation { key: String, message: String },

    #[error("missing upstream artifact {}: {message}", path.display())]
    Missing { path: PathBuf, message: String },

    #[error(transparent)]
    Runtime(starmt::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation { .. } => 2,
            CliError::Missing { .. } => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<starmt::Error> for CliError {
    fn from(e: starmt::Error) -> Self {
        match e {
            starmt::Error::Missing { path } => CliError::Missing {
                path,
                message: "not found (run the upstream command first)".into(),
            },
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(starmt::Error::Aborted(e.to_string()))
    }
}
