use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] attnpred::Error),

    /// A library error tagged with the file or cell it came from.
    #[error("{what}: {source}")]
    Context {
        what: String,
        #[source]
        source: attnpred::Error,
    },

    #[error("cannot write manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    /// Some sweep cells or imported files failed; the outputs were still written.
    #[error("{failed} of {total} {what} failed")]
    Partial { failed: usize, total: usize, what: &'static str },
}

impl CliError {
    pub fn context(what: impl std::fmt::Display) -> impl FnOnce(attnpred::Error) -> CliError {
        let what = what.to_string();
        move |source| CliError::Context { what, source }
    }

    /// 2 usage, 3 data, 4 numeric or training failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) | CliError::Context { source: e, .. } => match e {
                e if e.is_numeric() => 4,
                attnpred::Error::Config(_) | attnpred::Error::Parameter(_) => 2,
                _ => 3,
            },
            CliError::Manifest(_) | CliError::Partial { .. } => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
