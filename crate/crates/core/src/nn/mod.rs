//! Inference-only network kernels, stage networks and the `.sddw` format.

pub mod complexity;
pub mod config;
pub mod layers;
pub mod net;
pub mod tensor;
pub mod weights;

use thiserror::Error;

pub use complexity::{count_params_and_macs, Complexity, StageComplexity};
pub use config::{LayerKind, LayerSpec, ModelConfig, Scale, StageKind};
pub use net::{NetState, NormMode, NormStats, StageNet, Stcm};
pub use tensor::FeatureMap;
pub use weights::{Tensor, ValidationReport, WeightsBundle, WeightsError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch for {tensor}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}
