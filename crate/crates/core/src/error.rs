use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad error category, used for exit-code mapping in the command-line tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Format,
    Shape,
    Singular,
    Degenerate,
    Graph,
    Domain,
    Data,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("matrix is numerically singular (pivot {pivot:.3e} below threshold {threshold:.3e}){}", fmt_site(.site))]
    Singular {
        pivot: f64,
        threshold: f64,
        site: Option<String>,
    },

    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed bundle {}: {reason}", .path.display())]
    Format { path: PathBuf, reason: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

fn fmt_site(site: &Option<String>) -> String {
    match site {
        Some(s) => format!(" at {s}"),
        None => String::new(),
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape(_) => ErrorKind::Shape,
            Error::Singular { .. } => ErrorKind::Singular,
            Error::DegenerateTask(_) => ErrorKind::Degenerate,
            Error::Graph(_) => ErrorKind::Graph,
            Error::Domain(_) => ErrorKind::Domain,
            Error::Data(_) => ErrorKind::Data,
            Error::Config(_) => ErrorKind::Config,
            Error::Format { .. } => ErrorKind::Format,
            Error::Io { .. } => ErrorKind::Io,
            Error::Json { .. } => ErrorKind::Format,
            Error::Context { source, .. } => source.kind(),
        }
    }

    /// Wraps the error with a human-readable location (site, task, iteration, file).
    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Attaches a site identifier to a singularity error; other errors get a plain context.
    pub fn at_site(self, site: impl Into<String>) -> Error {
        match self {
            Error::Singular {
                pivot,
                threshold,
                site: None,
            } => Error::Singular {
                pivot,
                threshold,
                site: Some(site.into()),
            },
            other => other.context(site),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Error {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
