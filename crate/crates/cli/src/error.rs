use std::path::PathBuf;

use irfusion_core::CoreError;
use irfusion_tensor::checkpoint::CheckpointError;
use irfusion_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(reason: impl Into<String>) -> Self {
        CliError::Config(reason.into())
    }

    /// Process exit status: 2 configuration or usage, 3 data, 4 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Usage(_) => 2,
                CoreError::Tensor(TensorError::Config { .. }) => 2,
                CoreError::Io { .. } => 4,
                CoreError::Image { source, .. } if matches!(source, image::ImageError::IoError(_)) => 4,
                CoreError::Checkpoint(CheckpointError::Io(_)) => 4,
                CoreError::Tensor(_)
                | CoreError::Domain(_)
                | CoreError::Data(_)
                | CoreError::Image { .. }
                | CoreError::Checkpoint(_) => 3,
            },
        }
    }
}
