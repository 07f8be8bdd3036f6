use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] hqp_core::Error),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: record {record} (line {line}): {message}")]
    Record {
        path: PathBuf,
        record: String,
        line: usize,
        message: String,
    },
    #[error("{what} version {found} is not supported (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("{0}: not a checkpoint file")]
    BadMagic(PathBuf),
    #[error("{0}: content digest mismatch, file is corrupt or was modified")]
    Tampered(PathBuf),
    #[error("{0}: truncated or malformed checkpoint")]
    Truncated(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training aborted at epoch {epoch}, step {step}: {reason}")]
    Aborted {
        epoch: usize,
        step: u64,
        reason: String,
        last_good: Option<PathBuf>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
