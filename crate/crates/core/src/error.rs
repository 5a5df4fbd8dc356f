use mapkit_tensor::{CheckpointError, TensorError};
use thiserror::Error;

use crate::encoding::EncodingError;
use crate::metrics::MetricError;
use crate::scene::SceneError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type CoreResult<T> = std::result::Result<T, CoreError>;
