//! Parameter storage, initialization, and the named-tensor view the
//! optimizer, sensitivity probe, and checkpointing all share.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::config::{layer_of_param, LayerIndex, ModelConfig, TrainMode};
use crate::rng::Rng;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Low-rank adapter pair. Output contribution is x * a * b; b starts at zero
/// so the adapted map equals the base map at init.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub a: Tensor, // [d_in, rank]
    pub b: Tensor, // [rank, d_out]
}

/// A weight matrix plus an optional adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub weight: Tensor, // [d_in, d_out]
    pub adapter: Option<Adapter>,
}

impl LinearMap {
    fn init(d_in: usize, d_out: usize, rank: usize, rng: &mut Rng) -> Self {
        let mut weight = Tensor::zeros(vec![d_in, d_out]);
        rng.fill_normal(weight.data_mut(), INIT_STD);
        let adapter = (rank > 0).then(|| {
            let mut a = Tensor::zeros(vec![d_in, rank]);
            rng.fill_normal(a.data_mut(), INIT_STD);
            Adapter {
                a,
                b: Tensor::zeros(vec![rank, d_out]),
            }
        });
        LinearMap { weight, adapter }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub scale: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn init(dim: usize) -> Self {
        LayerNormParams {
            scale: Tensor::from_parts(vec![dim], vec![1.0; dim]),
            bias: Tensor::zeros(vec![dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: LinearMap,
    pub wk: LinearMap,
    pub wv: LinearMap,
    pub wo: LinearMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: LinearMap, // [d_model, d_ff]
    pub w2: LinearMap, // [d_ff, d_model]
}

/// One residual unit: attention branch behind ln1, feed-forward branch
/// behind ln2.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerUnit {
    pub ln1: LayerNormParams,
    pub attn: AttnParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embedding: Tensor, // [vocab, d_model]
    pub units: Vec<TransformerUnit>,
    pub final_ln: LayerNormParams,
    pub head: Tensor, // [d_model, vocab]
}

impl Params {
    /// Deterministic init from a seed: weights ~ N(0, 0.02), LN scale 1 /
    /// bias 0, adapter a ~ N(0, 0.02) with b zeroed.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let d = config.d_model;
        let rank = if config.mode == TrainMode::Peft {
            config.adapter_rank
        } else {
            0
        };
        let mut embedding = Tensor::zeros(vec![config.vocab_size, d]);
        rng.fill_normal(embedding.data_mut(), INIT_STD);
        let units = (0..config.n_units)
            .map(|_| TransformerUnit {
                ln1: LayerNormParams::init(d),
                attn: AttnParams {
                    wq: LinearMap::init(d, d, rank, rng),
                    wk: LinearMap::init(d, d, rank, rng),
                    wv: LinearMap::init(d, d, rank, rng),
                    wo: LinearMap::init(d, d, rank, rng),
                },
                ln2: LayerNormParams::init(d),
                ffn: FfnParams {
                    w1: LinearMap::init(d, config.d_ff, rank, rng),
                    w2: LinearMap::init(config.d_ff, d, rank, rng),
                },
            })
            .collect();
        let mut head = Tensor::zeros(vec![d, config.vocab_size]);
        rng.fill_normal(head.data_mut(), INIT_STD);
        Params {
            embedding,
            units,
            final_ln: LayerNormParams::init(d),
            head,
        }
    }

    /// Walk every parameter tensor in a fixed declaration order.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor)) {
        f("embedding", &self.embedding);
        for (u, unit) in self.units.iter().enumerate() {
            f(&format!("unit{u}.ln1.scale"), &unit.ln1.scale);
            f(&format!("unit{u}.ln1.bias"), &unit.ln1.bias);
            for (tag, map) in [
                ("wq", &unit.attn.wq),
                ("wk", &unit.attn.wk),
                ("wv", &unit.attn.wv),
                ("wo", &unit.attn.wo),
            ] {
                visit_map(&format!("unit{u}.attn.{tag}"), map, f);
            }
            f(&format!("unit{u}.ln2.scale"), &unit.ln2.scale);
            f(&format!("unit{u}.ln2.bias"), &unit.ln2.bias);
            for (tag, map) in [("w1", &unit.ffn.w1), ("w2", &unit.ffn.w2)] {
                visit_map(&format!("unit{u}.ffn.{tag}"), map, f);
            }
        }
        f("final_ln.scale", &self.final_ln.scale);
        f("final_ln.bias", &self.final_ln.bias);
        f("head", &self.head);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        f("embedding", &mut self.embedding);
        for (u, unit) in self.units.iter_mut().enumerate() {
            f(&format!("unit{u}.ln1.scale"), &mut unit.ln1.scale);
            f(&format!("unit{u}.ln1.bias"), &mut unit.ln1.bias);
            for (tag, map) in [
                ("wq", &mut unit.attn.wq),
                ("wk", &mut unit.attn.wk),
                ("wv", &mut unit.attn.wv),
                ("wo", &mut unit.attn.wo),
            ] {
                visit_map_mut(&format!("unit{u}.attn.{tag}"), map, f);
            }
            f(&format!("unit{u}.ln2.scale"), &mut unit.ln2.scale);
            f(&format!("unit{u}.ln2.bias"), &mut unit.ln2.bias);
            for (tag, map) in [("w1", &mut unit.ffn.w1), ("w2", &mut unit.ffn.w2)] {
                visit_map_mut(&format!("unit{u}.ffn.{tag}"), map, f);
            }
        }
        f("final_ln.scale", &mut self.final_ln.scale);
        f("final_ln.bias", &mut self.final_ln.bias);
        f("head", &mut self.head);
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

fn visit_map(prefix: &str, map: &LinearMap, f: &mut impl FnMut(&str, &Tensor)) {
    f(&format!("{prefix}.weight"), &map.weight);
    if let Some(ad) = &map.adapter {
        f(&format!("{prefix}.adapter_a"), &ad.a);
        f(&format!("{prefix}.adapter_b"), &ad.b);
    }
}

fn visit_map_mut(prefix: &str, map: &mut LinearMap, f: &mut impl FnMut(&str, &mut Tensor)) {
    f(&format!("{prefix}.weight"), &mut map.weight);
    if let Some(ad) = &mut map.adapter {
        f(&format!("{prefix}.adapter_a"), &mut ad.a);
        f(&format!("{prefix}.adapter_b"), &mut ad.b);
    }
}

/// Whether a named parameter receives gradients under the given mode.
/// In peft mode only adapters and layer-norm scales train; base weights,
/// LN biases, the embedding, and the head are frozen.
pub fn is_trainable(name: &str, mode: TrainMode) -> bool {
    match mode {
        TrainMode::Full => true,
        TrainMode::Peft => {
            name.ends_with(".adapter_a") || name.ends_with(".adapter_b") || name.ends_with(".scale")
        }
    }
}

/// Named gradient tensors. Entries exist only for parameters that train;
/// a dropped layer's trainable entries are present and exactly zero, while
/// frozen parameters never materialize a gradient at all.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    entries: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.entries.insert(name.into(), grad);
    }

    /// Accumulate into an existing entry, or insert.
    pub fn accumulate(&mut self, name: &str, grad: Tensor) {
        match self.entries.get_mut(name) {
            Some(t) => {
                debug_assert_eq!(t.shape(), grad.shape());
                for (d, s) in t.data_mut().iter_mut().zip(grad.iter()) {
                    *d += s;
                }
            }
            None => {
                self.entries.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// L2 norm per entry, in name order.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.l2_norm()))
            .collect()
    }

    /// Names of entries belonging to one droppable layer.
    pub fn layer_entries(&self, layer: LayerIndex) -> Vec<&String> {
        self.entries
            .keys()
            .filter(|n| layer_of_param(n) == Some(layer))
            .collect()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (name, t) in &self.entries {
            if t.ensure_finite(name).is_err() {
                let loc = match layer_of_param(name) {
                    Some(l) => format!("layer {} ({name})", l.flat()),
                    None => name.clone(),
                };
                return Err(Error::Numeric(format!("non-finite gradient in {loc}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: TrainMode, rank: usize) -> ModelConfig {
        ModelConfig {
            n_units: 2,
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            vocab_size: 11,
            seq_len: 5,
            mode,
            adapter_rank: rank,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let c = cfg(TrainMode::Full, 0);
        let a = Params::init(&c, &mut Rng::new(9));
        let b = Params::init(&c, &mut Rng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn adapters_start_at_zero() {
        let c = cfg(TrainMode::Peft, 3);
        let p = Params::init(&c, &mut Rng::new(1));
        for unit in &p.units {
            let ad = unit.attn.wq.adapter.as_ref().unwrap();
            assert!(ad.b.iter().all(|&v| v == 0.0));
            assert!(ad.a.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn trainability_rules() {
        assert!(is_trainable("unit0.attn.wq.weight", TrainMode::Full));
        assert!(!is_trainable("unit0.attn.wq.weight", TrainMode::Peft));
        assert!(is_trainable("unit0.attn.wq.adapter_b", TrainMode::Peft));
        assert!(is_trainable("unit0.ln1.scale", TrainMode::Peft));
        assert!(!is_trainable("unit0.ln1.bias", TrainMode::Peft));
        assert!(!is_trainable("embedding", TrainMode::Peft));
        assert!(!is_trainable("head", TrainMode::Peft));
        assert!(is_trainable("final_ln.scale", TrainMode::Peft));
    }

    #[test]
    fn visit_order_is_stable() {
        let c = cfg(TrainMode::Full, 0);
        let p = Params::init(&c, &mut Rng::new(3));
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.first().map(String::as_str), Some("embedding"));
        assert_eq!(names.last().map(String::as_str), Some("head"));
        assert!(names.contains(&"unit1.ffn.w2.weight".to_string()));
    }
}
