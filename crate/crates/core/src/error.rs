use std::path::PathBuf;

use dpfrl_autodiff::AdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DpfrlError {
    #[error(transparent)]
    Autodiff(#[from] AdError),

    #[error("filter error at step {step}: {detail}")]
    Filter { step: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("environment error: {0}")]
    Env(String),

    #[error("rollout error (env {env}, step {step}): {source}")]
    Rollout {
        env: usize,
        step: u64,
        #[source]
        source: Box<DpfrlError>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {detail} (diagnostic dump: {dump})", dump = .dump.display())]
    Training { detail: String, dump: PathBuf },

    #[error("evaluation requested zero episodes")]
    EmptyReport,

    #[error("no metrics found under {}", .0.display())]
    NoMetrics(PathBuf),

    #[error("{path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Parse(String),
}

impl DpfrlError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DpfrlError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = DpfrlError> = std::result::Result<T, E>;
