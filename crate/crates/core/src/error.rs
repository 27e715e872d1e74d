use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported feature file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Length { expected: u64, found: u64 },

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A class-incremental protocol rule was broken, e.g. a label outside the
    /// seen-class mask or a memory vector belonging to the task in progress.
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("cannot estimate class {class}: no samples")]
    EmptyClass { class: u32 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("runs are not comparable: {0}")]
    Incomparable(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
