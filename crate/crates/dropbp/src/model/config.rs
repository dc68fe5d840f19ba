use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training regime: full fine-tuning, or frozen base weights with low-rank
/// adapters (only adapters and layer-norm scales receive gradients).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Full,
    Peft,
}

/// Architecture description for the residual transformer stack.
///
/// A model has `n_units` transformer units; each unit carries an attention
/// branch and a feed-forward branch, so the drop machinery sees `2 * n_units`
/// layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_units: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub mode: TrainMode,
    #[serde(default)]
    pub adapter_rank: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.n_heads == 0
            || self.vocab_size < 2
            || self.seq_len == 0
        {
            return Err(Error::Argument("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Argument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.mode == TrainMode::Peft && self.adapter_rank == 0 {
            return Err(Error::Argument(
                "peft mode requires adapter_rank >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Droppable layer count: two branches per unit.
    pub fn n_layers(&self) -> usize {
        2 * self.n_units
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which half of a transformer unit a layer index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Attn,
    Ffn,
}

/// A droppable layer: (unit, branch), flattened as 2*unit + branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIndex {
    pub unit: usize,
    pub branch: Branch,
}

impl LayerIndex {
    pub fn flat(&self) -> usize {
        2 * self.unit
            + match self.branch {
                Branch::Attn => 0,
                Branch::Ffn => 1,
            }
    }

    pub fn from_flat(i: usize) -> Self {
        LayerIndex {
            unit: i / 2,
            branch: if i % 2 == 0 { Branch::Attn } else { Branch::Ffn },
        }
    }
}

/// Map a parameter name to the droppable layer owning it, if any.
/// Off-block parameters (embedding, final LN, head) return None.
pub fn layer_of_param(name: &str) -> Option<LayerIndex> {
    let rest = name.strip_prefix("unit")?;
    let dot = rest.find('.')?;
    let unit: usize = rest[..dot].parse().ok()?;
    let field = &rest[dot + 1..];
    let branch = if field.starts_with("ln1.") || field.starts_with("attn.") {
        Branch::Attn
    } else if field.starts_with("ln2.") || field.starts_with("ffn.") {
        Branch::Ffn
    } else {
        return None;
    };
    Some(LayerIndex { unit, branch })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_units: 2,
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            vocab_size: 11,
            seq_len: 5,
            mode: TrainMode::Full,
            adapter_rank: 0,
        }
    }

    #[test]
    fn validation() {
        assert!(cfg().validate().is_ok());
        let mut bad = cfg();
        bad.n_heads = 3;
        assert!(bad.validate().is_err());
        let mut peft = cfg();
        peft.mode = TrainMode::Peft;
        assert!(peft.validate().is_err());
        peft.adapter_rank = 2;
        assert!(peft.validate().is_ok());
    }

    #[test]
    fn flat_indexing() {
        for i in 0..8 {
            assert_eq!(LayerIndex::from_flat(i).flat(), i);
        }
        assert_eq!(
            LayerIndex { unit: 1, branch: Branch::Ffn }.flat(),
            3
        );
    }

    #[test]
    fn param_layer_mapping() {
        assert_eq!(
            layer_of_param("unit0.attn.wq.weight").map(|l| l.flat()),
            Some(0)
        );
        assert_eq!(layer_of_param("unit0.ln2.scale").map(|l| l.flat()), Some(1));
        assert_eq!(layer_of_param("unit3.ffn.w1.weight").map(|l| l.flat()), Some(7));
        assert_eq!(layer_of_param("embedding"), None);
        assert_eq!(layer_of_param("final_ln.scale"), None);
    }
}
