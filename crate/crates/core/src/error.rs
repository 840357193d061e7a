use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A primitive received operands whose shapes it cannot combine.
    #[error("{op}: incompatible dims {dims:?}")]
    Shape { op: &'static str, dims: Vec<Vec<usize>> },

    /// A primitive was evaluated outside its mathematical domain.
    #[error("{op}: value {value} outside domain ({reason})")]
    Domain {
        op: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed input record (manifest line, sequence invariant, ...).
    #[error("data error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { line: Option<usize>, msg: String },

    /// Malformed binary file (checkpoint or embedding store).
    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Parameter shapes in a checkpoint disagree with the target model.
    #[error("dimension mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    Dimension {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, dims: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            dims: dims.iter().map(|d| d.to_vec()).collect(),
        }
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data {
            line: None,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numbers rather than by inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Domain { .. })
    }
}
