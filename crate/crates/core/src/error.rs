use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DsdnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DsdnError {
    /// A dialogue, state, or schema file disagrees with the ontology.
    #[error("schema violation: {0}")]
    Schema(String),

    /// A required field is absent from an input document.
    #[error("missing required field `{field}` ({context})")]
    MissingField { field: String, context: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("prediction/gold alignment error: {message}; missing: [{}]", missing.join(", "))]
    Alignment {
        message: String,
        missing: Vec<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible schema: checkpoint hash {expected}, data hash {found}")]
    Compatibility { expected: String, found: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DsdnError {
    /// Stable machine-readable category, used by the CLI for exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            DsdnError::Schema(_) | DsdnError::MissingField { .. } => "schema",
            DsdnError::Argument(_) => "argument",
            DsdnError::Config(_) => "config",
            DsdnError::Parse { .. } | DsdnError::Json(_) => "parse",
            DsdnError::Numeric(_) => "numeric",
            DsdnError::Alignment { .. } => "alignment",
            DsdnError::Checkpoint(_) => "checkpoint",
            DsdnError::Compatibility { .. } => "compatibility",
            DsdnError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DsdnError::Io {
            path: path.into(),
            source,
        }
    }
}
