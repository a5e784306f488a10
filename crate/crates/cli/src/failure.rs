//! Error classification for process exit codes.

use std::fmt;
use std::process::ExitCode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Runtime,
}

impl Kind {
    pub fn exit_code(self) -> ExitCode {
        ExitCode::from(match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Runtime => 4,
        })
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub fn config_error(msg: impl fmt::Display) -> Failure {
    Failure {
        kind: Kind::Config,
        error: anyhow::anyhow!("{msg}"),
    }
}

pub fn runtime_error(msg: impl fmt::Display) -> Failure {
    Failure {
        kind: Kind::Runtime,
        error: anyhow::anyhow!("{msg}"),
    }
}

fn classify(e: &metaikg::Error) -> Kind {
    use metaikg::Error as E;
    match e {
        E::Io { .. } | E::Parse { .. } | E::UnknownRelation { .. } | E::IdOutOfRange { .. } => {
            Kind::Data
        }
        E::EmptySplit(_) | E::NoUsableTriplets | E::InsufficientNegatives { .. } => Kind::Data,
        E::Config(_) | E::InvalidArgument(_) | E::Checkpoint(_) => Kind::Config,
        E::DegenerateBatch(_) | E::EmptySubgraph | E::Json(_) => Kind::Runtime,
    }
}

impl From<metaikg::Error> for Failure {
    fn from(e: metaikg::Error) -> Self {
        Failure {
            kind: classify(&e),
            error: e.into(),
        }
    }
}

/// Adds context while keeping the kind.
pub trait Context<T> {
    fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Result<T, Failure>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Result<T, Failure> {
        self.map_err(|e| {
            let f = e.into();
            Failure {
                kind: f.kind,
                error: f.error.context(msg),
            }
        })
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            kind: Kind::Runtime,
            error: e.into(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure {
            kind: Kind::Runtime,
            error: e.into(),
        }
    }
}
