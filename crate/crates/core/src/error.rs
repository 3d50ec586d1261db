use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("corrupt payload at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged on client {client} (round {round}, epoch {epoch}): loss = {loss}")]
    Divergence {
        client: usize,
        round: u64,
        epoch: usize,
        loss: f64,
    },

    #[error("identity violated: {0}")]
    Identity(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("seed {seed}, round {round}: {source}")]
    Run {
        seed: u64,
        round: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn corrupt(offset: usize, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, skipping client/run context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Client { source, .. } | Error::Run { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for the CLI: 1 config, 2 runtime, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) => 1,
            Error::Io { .. } => 3,
            _ => 2,
        }
    }
}
