//! Closed-form FLOPs and activation-memory accounting.
//!
//! The per-layer costs are derived from shapes with the same conventions the
//! live kernels meter under (2mkn matmuls, one flop per element per
//! elementwise pass), term for term, so a forced forward/backward reconciles
//! with the analytic totals exactly. The f_out/f_grad/f_param triple covers
//! the linear maps, where output, input-gradient, and parameter-gradient
//! products all share the 2mkn count; the attention score products (which
//! have no parameters and double in backward) and the elementwise passes are
//! reported separately.

use crate::dropbp::DropRates;
use crate::error::{Error, Result};
use crate::flops;
use crate::model::{LayerIndex, ModelConfig, TrainMode};
use crate::tensor::ELEMENT_BYTES;

/// Per-branch flop and byte profile at a fixed batch and sequence length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: LayerIndex,
    /// Linear-map forward products.
    pub f_out: u64,
    /// Linear-map input-gradient products. Equals f_out.
    pub f_grad: u64,
    /// Linear-map parameter-gradient products. Zero for frozen maps, so in
    /// peft mode only the adapters contribute.
    pub f_param: u64,
    /// Attention score/context products in forward (attn branches only).
    pub score_fwd: u64,
    /// Their backward counterparts; twice score_fwd.
    pub score_bwd: u64,
    /// Elementwise forward passes (norms, softmax, gelu, merges).
    pub ew_fwd: u64,
    /// Elementwise backward passes.
    pub ew_bwd: u64,
    /// Bytes cached for backward when the layer is kept.
    pub activation_bytes: u64,
}

impl LayerCost {
    pub fn forward_total(&self) -> u64 {
        self.f_out + self.score_fwd + self.ew_fwd
    }

    /// Everything a drop decision saves: the whole branch backward.
    pub fn backward_total(&self) -> u64 {
        self.f_grad + self.f_param + self.score_bwd + self.ew_bwd
    }
}

/// Costs outside the droppable stack: embedding, final norm, head, loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffBlockCost {
    pub fwd: u64,
    pub bwd: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct CostModel {
    pub batch: usize,
    pub seq: usize,
    pub mode: TrainMode,
    layers: Vec<LayerCost>,
    off_block: OffBlockCost,
}

impl CostModel {
    /// Costs for one training iteration at the config's sequence length.
    pub fn new(config: &ModelConfig, batch: usize) -> Self {
        Self::with_seq(config, batch, config.seq_len)
    }

    /// Same, at an explicit sequence length (memory-budget scans).
    pub fn with_seq(config: &ModelConfig, batch: usize, seq: usize) -> Self {
        let n = batch * seq;
        let d = config.d_model;
        let dff = config.d_ff;
        let heads = config.n_heads;
        let v = config.vocab_size;
        let rank = if config.mode == TrainMode::Peft {
            config.adapter_rank
        } else {
            0
        };
        let score_elems = batch * heads * seq * seq;

        let mut layers = Vec::with_capacity(config.n_layers());
        for flat in 0..config.n_layers() {
            let layer = LayerIndex::from_flat(flat);
            let cost = match flat % 2 {
                0 => attn_cost(layer, config.mode, n, d, rank, score_elems, seq, batch, heads),
                _ => ffn_cost(layer, config.mode, n, d, dff, rank),
            };
            layers.push(cost);
        }

        // Embedding (gather + scatter), final norm, head, and loss.
        let mut off_fwd = flops::embedding_fwd(n * d);
        off_fwd += flops::layer_norm_fwd(n * d);
        off_fwd += flops::matmul_fwd(n, d, v);
        off_fwd += flops::cross_entropy_fwd(n * v);
        let mut off_bwd = flops::cross_entropy_bwd(n * v);
        off_bwd += flops::matmul_grad_one(n, d, v); // head input gradient
        if config.mode == TrainMode::Full {
            off_bwd += flops::matmul_grad_one(n, d, v); // head weight gradient
        }
        off_bwd += flops::layer_norm_bwd(n * d);
        if config.mode == TrainMode::Full {
            off_bwd += flops::embedding_bwd(n * d);
        }
        let off_bytes = (2 * n * d + n) as u64 * ELEMENT_BYTES;

        CostModel {
            batch,
            seq,
            mode: config.mode,
            layers,
            off_block: OffBlockCost {
                fwd: off_fwd,
                bwd: off_bwd,
                bytes: off_bytes,
            },
        }
    }

    pub fn layer_costs(&self) -> &[LayerCost] {
        &self.layers
    }

    pub fn off_block(&self) -> &OffBlockCost {
        &self.off_block
    }

    /// Per-layer backward flops, the allocator's F_i.
    pub fn backward_flops(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.backward_total() as f64).collect()
    }

    pub fn block_forward(&self) -> u64 {
        self.layers.iter().map(LayerCost::forward_total).sum()
    }

    pub fn block_backward(&self) -> u64 {
        self.layers.iter().map(LayerCost::backward_total).sum()
    }

    /// Whole-iteration forward flops (drops never change this).
    pub fn total_forward(&self) -> u64 {
        self.block_forward() + self.off_block.fwd
    }

    /// Whole-iteration backward flops with no drops.
    pub fn total_backward(&self) -> u64 {
        self.block_backward() + self.off_block.bwd
    }

    /// Whole-iteration total with no drops.
    pub fn total_flops(&self) -> u64 {
        self.total_forward() + self.total_backward()
    }

    /// Expected per-iteration total under the given rates: forward plus
    /// off-block backward in full, plus (1 - p_i) of each branch backward.
    pub fn expected_flops(&self, rates: &DropRates) -> f64 {
        self.total_forward() as f64
            + self.off_block.bwd as f64
            + self.expected_block_backward(rates)
    }

    /// Expected backward flops over the droppable layers only.
    pub fn expected_block_backward(&self, rates: &DropRates) -> f64 {
        // Integer accumulation in tenths keeps the uniform-rate linearity
        // exact: sum (10 - t_i) * bwd_i / 10.
        let tenths: u128 = rates
            .rates()
            .iter()
            .zip(&self.layers)
            .map(|(r, l)| u128::from(10 - r.tenths()) * u128::from(l.backward_total()))
            .sum();
        tenths as f64 / 10.0
    }

    /// Expected block flops (forward + expected backward), no off-block.
    pub fn expected_block_flops(&self, rates: &DropRates) -> f64 {
        self.block_forward() as f64 + self.expected_block_backward(rates)
    }

    /// Block-relative expected reduction under the rates, from the exact
    /// cost model (includes score and elementwise terms).
    pub fn block_reduction(&self, rates: &DropRates) -> f64 {
        let base = (self.block_forward() + self.block_backward()) as f64;
        1.0 - self.expected_block_flops(rates) / base
    }

    /// Whole-model expected reduction under the rates.
    pub fn total_reduction(&self, rates: &DropRates) -> f64 {
        1.0 - self.expected_flops(rates) / self.total_flops() as f64
    }

    pub fn block_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.activation_bytes).sum()
    }

    /// Expected cached block bytes in integer tenths (exact).
    pub fn expected_block_bytes_tenths(&self, rates: &DropRates) -> u128 {
        rates
            .rates()
            .iter()
            .zip(&self.layers)
            .map(|(r, l)| u128::from(10 - r.tenths()) * u128::from(l.activation_bytes))
            .sum()
    }

    /// Expected cached bytes: block expectation plus the off-block floor.
    pub fn expected_bytes(&self, rates: &DropRates) -> f64 {
        self.expected_block_bytes_tenths(rates) as f64 / 10.0 + self.off_block.bytes as f64
    }
}

#[allow(clippy::too_many_arguments)]
fn attn_cost(
    layer: LayerIndex,
    mode: TrainMode,
    n: usize,
    d: usize,
    rank: usize,
    score_elems: usize,
    seq: usize,
    batch: usize,
    heads: usize,
) -> LayerCost {
    let dh = d / heads;
    let mut f_out = 4 * flops::matmul_fwd(n, d, d);
    let mut f_grad = 4 * flops::matmul_grad_one(n, d, d);
    let mut f_param = if mode == TrainMode::Full {
        4 * flops::matmul_grad_one(n, d, d)
    } else {
        0
    };
    let mut ew_fwd = flops::layer_norm_fwd(n * d) + flops::scale(score_elems)
        + flops::softmax_fwd(score_elems)
        + flops::add(n * d); // residual merge
    let mut ew_bwd = flops::layer_norm_bwd(n * d)
        + flops::softmax_bwd(score_elems)
        + flops::scale(score_elems)
        + 2 * flops::add(n * d) // q/k/v input-gradient accumulation
        + flops::add(n * d); // residual gradient accumulation
    if rank > 0 {
        // Four adapted maps, all d -> d.
        let per_fwd = flops::matmul_fwd(n, d, rank) + flops::matmul_fwd(n, rank, d);
        f_out += 4 * per_fwd;
        f_grad += 4 * per_fwd;
        f_param += 4 * per_fwd;
        ew_fwd += 4 * flops::add(n * d);
        ew_bwd += 4 * flops::add(n * d);
    }
    // Score and context products: each 2 B S^2 d forward, doubled backward.
    let score_one = batch as u64 * flops::matmul_fwd(seq, dh, seq) * heads as u64;
    let score_fwd = 2 * score_one;
    let score_bwd = 4 * score_one;

    let bytes = (6 * n * d + n + score_elems + 4 * n * rank) as u64 * ELEMENT_BYTES;
    LayerCost {
        layer,
        f_out,
        f_grad,
        f_param,
        score_fwd,
        score_bwd,
        ew_fwd,
        ew_bwd,
        activation_bytes: bytes,
    }
}

fn ffn_cost(
    layer: LayerIndex,
    mode: TrainMode,
    n: usize,
    d: usize,
    dff: usize,
    rank: usize,
) -> LayerCost {
    let mut f_out = flops::matmul_fwd(n, d, dff) + flops::matmul_fwd(n, dff, d);
    let mut f_grad = f_out;
    let mut f_param = if mode == TrainMode::Full { f_out } else { 0 };
    let mut ew_fwd = flops::layer_norm_fwd(n * d) + flops::gelu_fwd(n * dff) + flops::add(n * d);
    let mut ew_bwd = flops::layer_norm_bwd(n * d) + flops::gelu_bwd(n * dff) + flops::add(n * d);
    if rank > 0 {
        let ad1 = flops::matmul_fwd(n, d, rank) + flops::matmul_fwd(n, rank, dff);
        let ad2 = flops::matmul_fwd(n, dff, rank) + flops::matmul_fwd(n, rank, d);
        f_out += ad1 + ad2;
        f_grad += ad1 + ad2;
        f_param += ad1 + ad2;
        ew_fwd += flops::add(n * dff) + flops::add(n * d);
        ew_bwd += flops::add(n * dff) + flops::add(n * d);
    }
    let bytes = (2 * n * d + n + 2 * n * dff + 2 * n * rank) as u64 * ELEMENT_BYTES;
    LayerCost {
        layer,
        f_out,
        f_grad,
        f_param,
        score_fwd: 0,
        score_bwd: 0,
        ew_fwd,
        ew_bwd,
        activation_bytes: bytes,
    }
}

/// Idealized block-relative reduction ratio at a target average drop rate:
/// 2/3 of the rate under full fine-tuning (output, input-gradient, and
/// parameter-gradient products all equal), half the rate in peft (parameter
/// gradients negligible).
pub fn reduction_ratio(mode: TrainMode, p_avg: f64) -> f64 {
    match mode {
        TrainMode::Full => 2.0 * p_avg / 3.0,
        TrainMode::Peft => p_avg / 2.0,
    }
}

/// Largest sequence length whose expected cached bytes fit the budget, under
/// the drop rates extended unchanged to the scanned model. Returns None when
/// even length 1 does not fit (the off-block floor exceeds the budget).
pub fn max_seq_len(
    config: &ModelConfig,
    batch: usize,
    rates: &DropRates,
    budget_bytes: u64,
) -> Result<Option<usize>> {
    if rates.n_layers() != config.n_layers() {
        return Err(Error::Argument(format!(
            "rates cover {} layers, model has {}",
            rates.n_layers(),
            config.n_layers()
        )));
    }
    let bytes_at = |seq: usize| -> f64 {
        CostModel::with_seq(config, batch, seq).expected_bytes(rates)
    };
    let budget = budget_bytes as f64;
    if bytes_at(1) > budget {
        return Ok(None);
    }
    // Bytes grow strictly with seq; double then bisect.
    let mut hi = 1usize;
    const CAP: usize = 1 << 26;
    while hi < CAP && bytes_at(hi * 2) <= budget {
        hi *= 2;
    }
    let mut lo = hi; // lo fits
    hi *= 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if bytes_at(mid) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropbp::GridRate;

    fn cfg(mode: TrainMode) -> ModelConfig {
        ModelConfig {
            n_units: 2,
            d_model: 16,
            d_ff: 32,
            n_heads: 4,
            vocab_size: 13,
            seq_len: 6,
            mode,
            adapter_rank: if mode == TrainMode::Peft { 2 } else { 0 },
        }
    }

    #[test]
    fn f_out_equals_f_grad_everywhere() {
        for mode in [TrainMode::Full, TrainMode::Peft] {
            let m = CostModel::new(&cfg(mode), 3);
            for l in m.layer_costs() {
                assert_eq!(l.f_out, l.f_grad, "layer {:?}", l.layer);
            }
        }
    }

    #[test]
    fn peft_param_gradients_are_adapter_only() {
        let m = CostModel::new(&cfg(TrainMode::Peft), 2);
        let full = CostModel::new(&cfg(TrainMode::Full), 2);
        for (p, f) in m.layer_costs().iter().zip(full.layer_costs()) {
            assert!(p.f_param > 0);
            assert!(p.f_param < f.f_param);
        }
    }

    #[test]
    fn doubling_seq_doubles_linear_terms_and_quadruples_scores() {
        let c = cfg(TrainMode::Full);
        let a = CostModel::with_seq(&c, 1, 4);
        let b = CostModel::with_seq(&c, 1, 8);
        for (la, lb) in a.layer_costs().iter().zip(b.layer_costs()) {
            assert_eq!(lb.f_out, 2 * la.f_out);
            assert_eq!(lb.f_grad, 2 * la.f_grad);
            assert_eq!(lb.f_param, 2 * la.f_param);
            assert_eq!(lb.score_fwd, 4 * la.score_fwd);
            assert_eq!(lb.score_bwd, 4 * la.score_bwd);
        }
    }

    #[test]
    fn expected_flops_no_drop_matches_total() {
        let m = CostModel::new(&cfg(TrainMode::Full), 2);
        let rates = DropRates::zeros(4);
        assert_eq!(m.expected_flops(&rates), m.total_flops() as f64);
    }

    #[test]
    fn expected_flops_all_dropped_leaves_forward_and_off_block() {
        let m = CostModel::new(&cfg(TrainMode::Full), 2);
        let rates = DropRates::uniform(4, 1.0).unwrap();
        let expect = (m.total_forward() + m.off_block().bwd) as f64;
        assert_eq!(m.expected_flops(&rates), expect);
    }

    #[test]
    fn closed_form_ratio_values() {
        assert_eq!(reduction_ratio(TrainMode::Full, 0.75), 0.5);
        assert_eq!(reduction_ratio(TrainMode::Peft, 0.875), 0.4375);
        assert_eq!(reduction_ratio(TrainMode::Full, 0.0), 0.0);
        assert_eq!(reduction_ratio(TrainMode::Peft, 0.0), 0.0);
        assert!((reduction_ratio(TrainMode::Full, 0.875) - 0.5833333333333334).abs() < 1e-15);
    }

    #[test]
    fn block_reduction_tracks_closed_form_in_full_mode() {
        // The exact model includes elementwise terms, so the block-level
        // reduction sits within half a point of (2/3) p.
        let c = ModelConfig {
            n_units: 2,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            vocab_size: 32,
            seq_len: 32,
            mode: TrainMode::Full,
            adapter_rank: 0,
        };
        let m = CostModel::new(&c, 4);
        for tenths in [5u8, 8] {
            let rates =
                DropRates::uniform(4, f64::from(tenths) / 10.0).unwrap();
            let ideal = reduction_ratio(TrainMode::Full, f64::from(tenths) / 10.0);
            let got = m.block_reduction(&rates);
            assert!((got - ideal).abs() < 0.005, "p={tenths}: {got} vs {ideal}");
        }
    }

    #[test]
    fn bytes_scale_linearly_in_keep_fraction() {
        let m = CostModel::new(&cfg(TrainMode::Full), 2);
        let baseline = m.block_bytes() as u128;
        for t in 0..=10u8 {
            let rates = DropRates::uniform(4, f64::from(t) / 10.0).unwrap();
            assert_eq!(
                m.expected_block_bytes_tenths(&rates),
                u128::from(10 - t) * baseline
            );
        }
    }

    #[test]
    fn monotone_in_each_rate() {
        let m = CostModel::new(&cfg(TrainMode::Full), 2);
        let base = DropRates::zeros(4);
        for i in 0..4 {
            let mut bumped = base.clone();
            bumped.bump(i);
            assert!(m.expected_flops(&bumped) < m.expected_flops(&base));
            assert!(m.expected_bytes(&bumped) < m.expected_bytes(&base));
        }
    }

    #[test]
    fn max_seq_len_infeasible_budget() {
        let c = cfg(TrainMode::Full);
        let rates = DropRates::zeros(4);
        assert_eq!(max_seq_len(&c, 1, &rates, 16).unwrap(), None);
    }

    #[test]
    fn max_seq_len_grows_with_drop_rate() {
        let c = ModelConfig {
            n_units: 2,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            vocab_size: 64,
            seq_len: 64,
            mode: TrainMode::Full,
            adapter_rank: 0,
        };
        let budget = 64 * 1024 * 1024;
        let lo = max_seq_len(&c, 1, &DropRates::uniform(4, 0.0).unwrap(), budget)
            .unwrap()
            .unwrap();
        let hi = max_seq_len(&c, 1, &DropRates::uniform(4, 0.9).unwrap(), budget)
            .unwrap()
            .unwrap();
        assert!(hi as f64 / lo as f64 > 2.0, "{hi} vs {lo}");
    }

    #[test]
    fn grid_rate_helper_is_consistent() {
        assert_eq!(GridRate::from_value(0.3).unwrap().value(), 0.3);
    }
}
