use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("registration diverged at level {level}: {reason} (after {} iterations)", trace_len)]
    Diverged {
        level: usize,
        reason: String,
        trace_len: usize,
    },

    #[error("correlation undefined: {0}")]
    CorrelationUndefined(String),

    #[error("solver did not converge: {0}")]
    Convergence(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage {stage}{}: {source}", case.as_ref().map(|c| format!(" (case {c})")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        case: Option<String>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str, case: Option<&str>) -> Self {
        Error::Stage {
            stage,
            case: case.map(str::to_string),
            source: Box::new(self),
        }
    }
}
