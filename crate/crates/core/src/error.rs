use std::path::PathBuf;

use fcl_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("memory buffer is empty")]
    MemoryEmpty,

    #[error("prototype undefined for class {0}: no labeled pixels among its exemplars")]
    PrototypeUndefined(u8),

    #[error("recovery impossible: memory buffer is empty")]
    RecoveryImpossible,

    #[error("metric undefined: every class has an empty union")]
    UndefinedMetric,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{origin}:{line}: {msg}")]
    Parse { origin: String, line: usize, msg: String },
}

impl Error {
    /// Errors caused by user input rather than by a broken runtime contract.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
