use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config, missing inputs or an unusable dataset.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] bsfa_core::Error),

    #[error(transparent)]
    Net(#[from] bsfa_net::NetError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Process exit code: 2 for usage and ingest problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}
