//! Desk-scale training engine for residual transformer networks with
//! stochastic skipping of backward propagation.
//!
//! The core mechanism trains a network while randomly dropping the backward
//! pass of individual residual branches: forward always runs in full, so the
//! model's outputs never change, but a dropped branch computes no gradients
//! and caches no activations. Per-layer drop rates are allocated from layer
//! sensitivities under a FLOPs budget, and an exact cost model predicts the
//! compute and activation-memory savings that the built-in meters then
//! confirm.
//!
//! Start with the crate examples (`cargo run --example train_copy`) or the
//! `dropbp` binary for the command-line surface.

pub mod baselines;
pub mod cli;
pub mod cost;
pub mod data;
pub mod dropbp;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod logging;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod sensitivity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use flops::FlopsMeter;
pub use model::{Model, ModelConfig, TokenBatch, TrainMode};
pub use tensor::Tensor;
