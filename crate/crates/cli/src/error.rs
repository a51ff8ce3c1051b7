use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),

    /// A numeric check ran to completion and failed.
    #[error("check failed: {0}")]
    Check(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Core(#[from] grkan::Error),
}

impl CliError {
    /// 0 ok, 1 usage, 2 numeric-check failure, 3 I/O or format error.
    pub fn exit_code(&self) -> i32 {
        use grkan::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Check(_) => 2,
            CliError::Io { .. } | CliError::Format(_) => 3,
            CliError::Core(e) => match e {
                E::Usage(_) | E::Config(_) | E::Shape(_) => 1,
                E::Domain(_)
                | E::Fit { .. }
                | E::DegenerateActivation { .. }
                | E::Divergence { .. } => 2,
                E::Format(_) | E::Io(_) => 3,
            },
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
