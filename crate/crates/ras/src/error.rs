use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ras_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed PPM/PGM data.
    #[error("{}: {msg}", path.display())]
    Pnm { path: PathBuf, msg: String },
    /// Malformed weight file; `offset` is where decoding stopped.
    #[error("weight file at byte {offset}: {msg}")]
    Weights { offset: usize, msg: String },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    /// Bad configuration or flags; reported before any work starts.
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Dataset(String),
    /// A check that ran to completion but did not pass.
    #[error("{0}")]
    Failed(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Whether the failure lies in what the user asked for rather than in
    /// running it.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Json { .. }
                | Error::Core(ras_core::Error::InvalidConfig(_) | ras_core::Error::InvalidSpec(_))
        )
    }
}
