//! Crate-wide error type.

use std::path::PathBuf;

/// Everything that can go wrong in the laboratory.
///
/// Variants map onto the command-line exit codes in [`crate::cli`]:
/// usage problems exit 2, [`Error::Format`] exits 3,
/// [`Error::Provenance`] exits 4 and everything else exits 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate softmax row: every entry is masked")]
    DegenerateRow,

    #[error("invalid input: {0}")]
    Input(String),

    #[error("model generation failed after {attempts} attempts (best English accuracy {best_accuracy:.4})")]
    Generation { attempts: u32, best_accuracy: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("invalid intervention plan: {0}")]
    Plan(String),

    #[error("invalid probe: {0}")]
    Probe(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::DegenerateRow => "degenerate-row",
            Error::Input(_) => "input",
            Error::Generation { .. } => "generation",
            Error::DegenerateData(_) => "degenerate-data",
            Error::Plan(_) => "plan",
            Error::Probe(_) => "probe",
            Error::Format(_) => "format",
            Error::Provenance(_) => "provenance",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
