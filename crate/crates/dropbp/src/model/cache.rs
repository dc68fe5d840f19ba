//! Activation storage between forward and backward.
//!
//! Only layers whose backward will actually run store their branch
//! activations; a dropped layer's slot stays empty and contributes zero
//! bytes. Byte accounting is element count times element size over exactly
//! the tensors backward reads.

use crate::error::{Error, Result};
use crate::ops::LayerNormCache;
use crate::tensor::Tensor;

/// What the attention-branch backward reads.
#[derive(Debug, Clone)]
pub struct AttnBranchCache {
    pub ln: LayerNormCache,
    /// Layer-norm output: input of the q/k/v projections.
    pub ln_out: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Attention probabilities, rows ordered (batch, head, query).
    pub probs: Tensor,
    /// Head-merged context: input of the output projection.
    pub merged: Tensor,
    /// Adapter mid products for wq, wk, wv, wo in peft mode.
    pub adapter_mid: Vec<Tensor>,
}

/// What the feed-forward-branch backward reads.
#[derive(Debug, Clone)]
pub struct FfnBranchCache {
    pub ln: LayerNormCache,
    pub ln_out: Tensor,
    /// Pre-activation, needed by the gelu backward.
    pub pre_act: Tensor,
    /// Post-activation: input of the second map.
    pub act: Tensor,
    /// Adapter mid products for w1, w2 in peft mode.
    pub adapter_mid: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub enum BranchCache {
    Attn(AttnBranchCache),
    Ffn(FfnBranchCache),
}

impl BranchCache {
    pub fn bytes(&self) -> u64 {
        match self {
            BranchCache::Attn(c) => {
                c.ln.x_hat.bytes()
                    + c.ln.inv_std.bytes()
                    + c.ln_out.bytes()
                    + c.q.bytes()
                    + c.k.bytes()
                    + c.v.bytes()
                    + c.probs.bytes()
                    + c.merged.bytes()
                    + c.adapter_mid.iter().map(Tensor::bytes).sum::<u64>()
            }
            BranchCache::Ffn(c) => {
                c.ln.x_hat.bytes()
                    + c.ln.inv_std.bytes()
                    + c.ln_out.bytes()
                    + c.pre_act.bytes()
                    + c.act.bytes()
                    + c.adapter_mid.iter().map(Tensor::bytes).sum::<u64>()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ActivationCache {
    /// Token ids the forward consumed (embedding backward scatters on them).
    pub tokens: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
    /// One slot per flattened layer; None for layers that cached nothing.
    pub layers: Vec<Option<BranchCache>>,
    pub final_ln: LayerNormCache,
    /// Final layer-norm output: input of the head projection.
    pub final_ln_out: Tensor,
}

impl ActivationCache {
    /// True if layer i stored its branch activations.
    pub fn present(&self, i: usize) -> bool {
        self.layers[i].is_some()
    }

    pub fn layer_bytes(&self, i: usize) -> u64 {
        self.layers[i].as_ref().map_or(0, BranchCache::bytes)
    }

    /// Bytes held for droppable layers only.
    pub fn block_bytes(&self) -> u64 {
        (0..self.layers.len()).map(|i| self.layer_bytes(i)).sum()
    }

    /// Bytes held outside the droppable layers (final LN, head input).
    pub fn off_block_bytes(&self) -> u64 {
        self.final_ln.x_hat.bytes() + self.final_ln.inv_std.bytes() + self.final_ln_out.bytes()
    }

    pub fn total_bytes(&self) -> u64 {
        self.block_bytes() + self.off_block_bytes()
    }

    /// Check the cache can serve a backward that keeps `kept` layers.
    /// Extra cached layers are fine; a kept layer without activations is not.
    pub fn check_covers(&self, needs: &[bool]) -> Result<()> {
        if needs.len() != self.layers.len() {
            return Err(Error::State(format!(
                "cache has {} layers, plan wants {}",
                self.layers.len(),
                needs.len()
            )));
        }
        for (i, &need) in needs.iter().enumerate() {
            if need && !self.present(i) {
                return Err(Error::State(format!(
                    "layer {i}: backward needs activations the forward did not cache"
                )));
            }
        }
        Ok(())
    }
}
