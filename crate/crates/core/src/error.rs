use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: relation `{name}` does not occur in the training graph")]
    UnknownRelation {
        path: PathBuf,
        line: usize,
        name: String,
    },

    #[error("{what} id {id} out of range (vocabulary size {len})")]
    IdOutOfRange {
        what: &'static str,
        id: u32,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0} relation set is empty; training requires both large-shot and few-shot relations")]
    EmptySplit(&'static str),

    #[error("degenerate batch: none of the {0} instances has an enclosing subgraph")]
    DegenerateBatch(usize),

    #[error("only {available} valid corruptions exist, {needed} required")]
    InsufficientNegatives { needed: usize, available: usize },

    #[error("no usable test triplets")]
    NoUsableTriplets,

    #[error("cannot score an empty subgraph")]
    EmptySubgraph,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
