//! Per-iteration execution plans.
//!
//! The stochastic drop machinery, the layer-dropping baselines, freezing,
//! and the path analyses all reduce to one plan shape: what each branch does
//! in forward and in backward.

/// What the backward pass does at one residual branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchBackward {
    /// Residual identity plus the branch path (normal training).
    Full,
    /// Residual identity only; the branch contributes no gradients and no
    /// cached activations.
    SkipBranch,
    /// Branch path only, without the residual identity. Used by the
    /// path-length analysis; parameter gradients are not produced.
    BranchOnly,
}

#[derive(Debug, Clone)]
pub struct IterationPlan {
    /// Backward treatment per flattened layer.
    pub backward: Vec<BranchBackward>,
    /// Layers whose branch is skipped in forward as well (layer dropping).
    pub forward_skip: Vec<bool>,
    /// Layers allowed to produce parameter gradients (freezing clears these).
    pub param_grads: Vec<bool>,
    /// Backward stops entirely below this flattened index (freezing).
    /// Zero means gradients flow all the way to the embedding.
    pub stop_below: usize,
}

impl IterationPlan {
    /// Everything trained, nothing skipped.
    pub fn baseline(n_layers: usize) -> Self {
        IterationPlan {
            backward: vec![BranchBackward::Full; n_layers],
            forward_skip: vec![false; n_layers],
            param_grads: vec![true; n_layers],
            stop_below: 0,
        }
    }

    /// Backward-only drops: forward always runs, dropped branches skip their
    /// backward and cache nothing.
    pub fn backward_drops(dropped: &[bool]) -> Self {
        let mut plan = Self::baseline(dropped.len());
        for (i, &d) in dropped.iter().enumerate() {
            if d {
                plan.backward[i] = BranchBackward::SkipBranch;
            }
        }
        plan
    }

    /// Layer dropping: a dropped branch is skipped in forward and backward.
    pub fn forward_drops(dropped: &[bool]) -> Self {
        let mut plan = Self::backward_drops(dropped);
        plan.forward_skip = dropped.to_vec();
        plan
    }

    /// Freeze everything below the lowest trainable layer: no parameter
    /// gradients there and no gradient flow past it.
    pub fn freeze(trainable: &[bool]) -> Self {
        let mut plan = Self::baseline(trainable.len());
        let cutoff = trainable.iter().position(|&t| t).unwrap_or(trainable.len());
        plan.stop_below = cutoff;
        for (i, &t) in trainable.iter().enumerate() {
            plan.param_grads[i] = t;
        }
        plan
    }

    /// Path-length analysis: branch-only backward through `subset`, residual
    /// identity through everything else.
    pub fn path_subset(n_layers: usize, subset: &[usize]) -> Self {
        let mut plan = Self::baseline(n_layers);
        for mode in plan.backward.iter_mut() {
            *mode = BranchBackward::SkipBranch;
        }
        for &i in subset {
            plan.backward[i] = BranchBackward::BranchOnly;
        }
        plan
    }

    pub fn n_layers(&self) -> usize {
        self.backward.len()
    }

    /// Whether forward must stash branch activations for this layer.
    pub fn needs_cache(&self, i: usize) -> bool {
        !self.forward_skip[i]
            && i >= self.stop_below
            && self.backward[i] != BranchBackward::SkipBranch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropped_layers_skip_cache() {
        let plan = IterationPlan::backward_drops(&[true, false, true, false]);
        assert!(!plan.needs_cache(0));
        assert!(plan.needs_cache(1));
        assert!(!plan.needs_cache(2));
        assert!(plan.needs_cache(3));
    }

    #[test]
    fn freeze_cutoff() {
        let plan = IterationPlan::freeze(&[false, false, true, true]);
        assert_eq!(plan.stop_below, 2);
        assert!(!plan.needs_cache(1));
        assert!(plan.needs_cache(2));
    }
}
