use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("corrupt tensor `{name}`: {reason}")]
    CorruptTensor { name: String, reason: String },

    #[error("tensor `{name}` has unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("non-finite value encountered in {0}")]
    Numeric(String),

    #[error("rank {rank} is outside 1..={max}")]
    Rank { rank: usize, max: usize },

    #[error("truncated SVD did not converge after {iterations} iterations")]
    Convergence { iterations: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("fine-tuned score equals base score ({0}); retention is undefined")]
    DegenerateBaseline(f64),

    #[error("base and fine-tuned checkpoints disagree on {} tensor(s): {}", names.len(), names.join(", "))]
    ArchitectureMismatch { names: Vec<String> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt entry `{name}`: {reason}")]
    CorruptEntry { name: String, reason: String },

    #[error("base checkpoint fingerprint mismatch: container expects {expected}, got {actual}")]
    BaseMismatch { expected: String, actual: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt_entry(name: &str, reason: impl Into<String>) -> Self {
        Error::CorruptEntry {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 user error, 2 data corruption, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Config(_)
            | Error::EmptyInput(_)
            | Error::DegenerateBaseline(_)
            | Error::ArchitectureMismatch { .. } => 1,
            Error::Format(_)
            | Error::CorruptTensor { .. }
            | Error::UnsupportedDtype { .. }
            | Error::CorruptEntry { .. }
            | Error::BaseMismatch { .. }
            | Error::Shape(_) => 2,
            Error::Numeric(_) | Error::Rank { .. } | Error::Convergence { .. } => 3,
        }
    }
}
