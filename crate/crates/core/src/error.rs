use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("truncation error: cutoff twoJ={cutoff} keeps only {kept_weight:.3e} of the photon-number distribution")]
    Truncation { cutoff: u32, kept_weight: f64 },

    #[error("numerical model error: {0}")]
    NumericalModel(String),

    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),

    #[error("empty level set at fraction {0}")]
    EmptyLevelSet(f64),

    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path} at offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("diagnostic failure: {0}")]
    Diagnostic(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Input(_)
            | Error::Domain(_)
            | Error::Truncation { .. }
            | Error::Io { .. } => 2,
            Error::Format { .. } | Error::Coverage(_) => 3,
            Error::NumericalModel(_)
            | Error::DegenerateVolume(_)
            | Error::EmptyLevelSet(_)
            | Error::Diagnostic(_) => 4,
        }
    }
}
