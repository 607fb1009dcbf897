use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dim} is {got}, expected {expected}")]
    Shape { op: &'static str, dim: &'static str, got: usize, expected: usize },

    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("layer {layer}: {msg}")]
    Topology { layer: String, msg: String },

    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    #[error("compactor already attached to {0}")]
    AlreadyAttached(String),

    #[error("layer {0} cannot be pruned: its output width is fixed by the latent")]
    Unprunable(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }

    pub(crate) fn topology(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Topology { layer: layer.into(), msg: msg.into() }
    }

    /// Errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Json(_) | Error::Checkpoint(_) | Error::Image { .. } | Error::Topology { .. }
        ) || matches!(self, Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound)
    }
}

pub(crate) fn ensure_dim(op: &'static str, dim: &'static str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::Shape { op, dim, got, expected })
    }
}
