use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the enhancement pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed PLY at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("unsupported content: {0}")]
    Unsupported(String),

    /// A precondition of a module operation does not hold.
    #[error("{module} contract violated: {msg}")]
    Contract { module: &'static str, msg: String },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("external tool `{command}` failed: {detail}")]
    ExternalTool { command: String, detail: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    /// A pipeline stage failed on one input.
    #[error("{stage} stage failed on {item}: {source}")]
    Stage {
        stage: &'static str,
        item: String,
        #[source]
        source: Box<Error>,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at(stage: &'static str, item: impl Into<String>) -> impl FnOnce(Error) -> Error {
        let item = item.into();
        move |e| Error::Stage {
            stage,
            item,
            source: Box::new(e),
        }
    }

    pub(crate) fn contract(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            module,
            msg: msg.into(),
        }
    }
}
