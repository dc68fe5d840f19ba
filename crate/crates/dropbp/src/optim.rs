//! AdamW with decoupled weight decay, plus the cosine learning-rate curve.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moments per parameter entry. A parameter gains state the
/// first time a gradient entry (even a zero one) shows up for it; frozen
/// parameters never do.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    moments: BTreeMap<String, (Tensor, Tensor)>,
    step: u64,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay update over every gradient entry.
///
/// A zero gradient still decays the moments and, with nonzero weight decay,
/// shrinks the parameter: that is what a framework does when a gradient
/// tensor exists but is zero. Parameters with no gradient entry are left
/// completely untouched.
pub fn adamw_step(
    params: &mut Params,
    grads: &Gradients,
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut failure: Option<Error> = None;

    params.visit_mut(&mut |name, param| {
        if failure.is_some() {
            return;
        }
        let Some(grad) = grads.get(name) else {
            return;
        };
        if grad.shape() != param.shape() {
            failure = Some(Error::Dimension(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                grad.shape(),
                param.shape()
            )));
            return;
        }
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape().to_vec()), Tensor::zeros(param.shape().to_vec())));
        let md = m.data_mut();
        let vd = v.data_mut();
        let pd = param.data_mut();
        for i in 0..pd.len() {
            let g = grad.data()[i];
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * pd[i]);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Cosine annealing: lr_min + (lr_max - lr_min) (1 + cos(pi iter/total)) / 2.
pub fn cosine_lr(iter: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    debug_assert!(iter <= total);
    if total == 0 {
        return lr_max;
    }
    let phase = std::f64::consts::PI * iter as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig, TrainMode};

    fn tiny_model() -> Model {
        Model::init(
            ModelConfig {
                n_units: 1,
                d_model: 4,
                d_ff: 8,
                n_heads: 2,
                vocab_size: 5,
                seq_len: 3,
                mode: TrainMode::Full,
                adapter_rank: 0,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut model = tiny_model();
        let before = model.params.clone();
        let mut grads = Gradients::new();
        model.params.visit(&mut |name, t| {
            grads.insert(name, Tensor::zeros(t.shape().to_vec()));
        });
        let mut state = AdamWState::new();
        adamw_step(&mut model.params, &grads, &mut state, 1e-3, &AdamWConfig::default()).unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn first_step_scalar_oracle() {
        // With a single gradient g, m_hat = g and v_hat = g^2, so the update
        // is -lr (g/(|g| + eps) + wd * theta).
        let mut model = tiny_model();
        let theta0 = model.params.head.data()[0];
        let g = 0.37;
        let mut grads = Gradients::new();
        let mut gt = Tensor::zeros(model.params.head.shape().to_vec());
        gt.data_mut()[0] = g;
        grads.insert("head", gt);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let lr = 2e-3;
        let mut state = AdamWState::new();
        adamw_step(&mut model.params, &grads, &mut state, lr, &cfg).unwrap();
        let expect = theta0 - lr * (g / (g.abs() + cfg.eps) + cfg.weight_decay * theta0);
        let got = model.params.head.data()[0];
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn absent_entries_untouched_even_with_decay() {
        let mut model = tiny_model();
        let before = model.params.embedding.clone();
        let grads = Gradients::new();
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::new();
        adamw_step(&mut model.params, &grads, &mut state, 1e-2, &cfg).unwrap();
        assert_eq!(model.params.embedding, before);
    }

    #[test]
    fn cosine_boundaries() {
        assert_eq!(cosine_lr(0, 100, 3e-4, 1e-5), 3e-4);
        assert!((cosine_lr(100, 100, 3e-4, 1e-5) - 1e-5).abs() < 1e-20);
        let mid = cosine_lr(50, 100, 4.0, 2.0);
        assert!((mid - 3.0).abs() < 1e-12);
    }
}
