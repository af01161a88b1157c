//! Shared error taxonomy for the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor / layer / network shapes.
    #[error("dimension mismatch in {context}: {details}")]
    Dimension { context: String, details: String },

    /// A caller violated an API precondition (empty set, unknown treatment
    /// index, non-scalar loss node, out-of-range config value, ...).
    #[error("contract violation in {context}: {details}")]
    Contract { context: String, details: String },

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at iteration {iteration}: {details}")]
    TrainingDivergence { iteration: usize, details: String },

    /// Malformed textual input (CSV bundle, config file, checkpoint, fixture).
    #[error("parse error in {source_name} at line {line}: {details}")]
    Parse {
        source_name: String,
        line: usize,
        details: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dimension(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            details: details.into(),
        }
    }

    pub fn contract(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Contract {
            context: context.into(),
            details: details.into(),
        }
    }

    pub fn parse(source_name: impl Into<String>, line: usize, details: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            details: details.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Machine-readable JSON rendering used by the CLI on failure.
    pub fn to_json(&self) -> String {
        let kind = match self {
            Error::Dimension { .. } => "dimension",
            Error::Contract { .. } => "contract",
            Error::TrainingDivergence { .. } => "training_divergence",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        };
        serde_json::json!({ "error": { "kind": kind, "message": self.to_string() } }).to_string()
    }
}
