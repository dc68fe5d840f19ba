//! Residual transformer model: configuration, parameters, activation cache,
//! per-iteration plans, and the hand-written forward/backward.

pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod net;
pub mod params;
pub mod plan;

pub use cache::ActivationCache;
pub use config::{layer_of_param, Branch, LayerIndex, ModelConfig, TrainMode};
pub use net::{Model, TokenBatch};
pub use params::{is_trainable, Gradients, Params};
pub use plan::{BranchBackward, IterationPlan};
