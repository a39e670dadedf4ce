use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report. Variants are grouped so the CLI can
/// map them onto its exit codes (see [`Error::kind`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("visual hull is empty: no grid vertex survived carving")]
    EmptyHull,

    #[error("mesh validation failed: {message} ({} offending edges)", edges.len())]
    Validation { message: String, edges: Vec<[u32; 2]> },

    #[error("empty mesh: {0}")]
    EmptyMesh(String),

    #[error("coverage error: {skipped} of {total} samples fell outside the volume")]
    Coverage { skipped: usize, total: usize },

    #[error("atlas packing failed: charts need at least a {required}x{required} atlas")]
    Packing { required: u32 },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("stale state: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Validation,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::OutOfRange(_) | Error::State(_) => ErrorKind::Config,
            Error::Io { .. } | Error::Format(_) => ErrorKind::Io,
            Error::Validation { .. } | Error::Packing { .. } => ErrorKind::Validation,
            Error::EmptyHull
            | Error::EmptyMesh(_)
            | Error::Coverage { .. }
            | Error::Evaluation(_)
            | Error::Numeric(_) => ErrorKind::Numeric,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
