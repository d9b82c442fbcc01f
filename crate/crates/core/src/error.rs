use std::path::PathBuf;

/// Fatal conditions raised by the pipeline stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { path: PathBuf, offset: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no usable documents")]
    NoUsableDocuments,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },
    #[error("sampler gave up after {attempts} attempts to place label {label}")]
    SamplerExhausted { label: String, attempts: usize },
    #[error("non-finite gradient for parameter {name} at step {step}")]
    NonFiniteGradient { name: String, step: u64 },
    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },
    #[error("sequence length {len} exceeds max_position {max_position}")]
    SequenceTooLong { len: usize, max_position: usize },
    #[error("empty example list")]
    EmptyExamples,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
