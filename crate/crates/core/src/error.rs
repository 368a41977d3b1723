use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlpsError> = std::result::Result<T, E>;

/// Where in a run a numeric failure happened.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunContext {
    pub round: Option<usize>,
    pub client: Option<usize>,
    pub iter: Option<usize>,
}

impl RunContext {
    pub fn client(round: usize, client: usize) -> Self {
        Self { round: Some(round), client: Some(client), iter: None }
    }

    pub fn with_iter(mut self, iter: usize) -> Self {
        self.iter = Some(iter);
        self
    }
}

impl fmt::Display for RunContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(r) = self.round {
            parts.push(format!("round {r}"));
        }
        if let Some(c) = self.client {
            parts.push(format!("client {c}"));
        }
        if let Some(i) = self.iter {
            parts.push(format!("iter {i}"));
        }
        if parts.is_empty() {
            f.write_str("no context")
        } else {
            f.write_str(&parts.join(", "))
        }
    }
}

#[derive(Debug, Error)]
pub enum FlpsError {
    /// Shape or layout mismatch between values that must agree. Indicates a bug
    /// in the caller, not bad input data.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite {what} ({ctx})")]
    NonFinite { what: &'static str, ctx: RunContext },

    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse { path: String, offset: u64, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FlpsError {
    pub fn structural(msg: impl Into<String>) -> Self {
        FlpsError::Structural(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        FlpsError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlpsError::Io { path: path.into(), source }
    }

    /// Attach run context to a numeric error raised below the orchestrator.
    pub fn in_context(self, ctx: RunContext) -> Self {
        match self {
            FlpsError::NonFinite { what, ctx: inner } => FlpsError::NonFinite {
                what,
                ctx: RunContext {
                    round: inner.round.or(ctx.round),
                    client: inner.client.or(ctx.client),
                    iter: inner.iter.or(ctx.iter),
                },
            },
            other => other,
        }
    }
}
