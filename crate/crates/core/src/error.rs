use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied data failed validation.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("box {bbox} lies outside a {width}x{height} image")]
    OutOfBounds {
        bbox: String,
        width: u32,
        height: u32,
    },

    #[error("unknown symbol id {0}")]
    UnknownSymbol(u32),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("replay cassette has no entry for key {key}")]
    ReplayMiss { key: String },

    /// An LLM response could not be parsed, even after the repair pass.
    #[error("could not parse {what} from model response: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Parse {
            what,
            detail: detail.into(),
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Outermost stage tag, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// True for failures of an external backend (network, replay miss).
    pub fn is_backend(&self) -> bool {
        matches!(self.root(), Error::Backend(_) | Error::ReplayMiss { .. })
    }

    /// True for failures caused by bad caller input.
    pub fn is_validation(&self) -> bool {
        matches!(
            self.root(),
            Error::InvalidInput(_)
                | Error::OutOfBounds { .. }
                | Error::UnknownSymbol(_)
                | Error::Io { .. }
                | Error::Image(_)
                | Error::Json(_)
        )
    }
}

/// Extension for tagging results with a stage name.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
