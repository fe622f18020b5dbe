use kws_core::KwsError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Core(KwsError),
}

impl CliError {
    /// 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Core(e) => match e {
                KwsError::NonFinite(_) | KwsError::NonFiniteGradient(_) | KwsError::Diverged { .. } => 3,
                _ => 2,
            },
        }
    }
}

impl From<KwsError> for CliError {
    fn from(e: KwsError) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_context(what: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| {
        CliError::Core(KwsError::Io {
            context: what.to_string(),
            source: e,
        })
    }
}
