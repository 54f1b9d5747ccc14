//! Dual-path frequency-domain exposure correction built on channel-wise
//! selective state-space blocks, with a from-scratch autodiff engine.

pub mod cli;
pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selfcheck;
pub mod spectral;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_model, infer, param_count, Ablation, ModelConfig, ModelWeights};
pub use tensor::{Graph, Tensor, Var};
pub use train::{Checkpoint, TrainConfig};
