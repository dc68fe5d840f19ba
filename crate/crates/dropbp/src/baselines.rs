//! Comparison methods and structural analyses: layer freezing, layer
//! dropping (forward and backward), the progressive keep-prob schedule,
//! path-length gradient decomposition, and exact submodule counting.

use num_bigint::BigUint;
use num_traits::One;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::FlopsMeter;
use crate::model::{IterationPlan, Model, TokenBatch};
use crate::ops;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Comparison method selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum BaselineSpec {
    /// Plain training, nothing skipped.
    Baseline,
    /// Backward-only stochastic drops at a target average rate.
    DropBp { p_avg: f64 },
    /// The lowest floor(n_layers * p) layers never train.
    Freeze { p: f64 },
    /// Bernoulli drops applied to forward and backward alike.
    LayerDrop { p: f64 },
    /// Progressive layer dropping with a depth- and time-increasing rate.
    Pld { relative_flops: f64 },
}

/// Trainable flags per layer: the lowest floor(n_layers * p) are frozen.
pub fn freeze_mask(n_layers: usize, p: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Argument(format!("freeze fraction {p} outside [0, 1]")));
    }
    let frozen = ((n_layers as f64) * p).floor() as usize;
    Ok((0..n_layers).map(|i| i >= frozen).collect())
}

/// Independent Bernoulli(p) per layer, applied to forward and backward.
pub fn layerdrop_decisions(n_layers: usize, p: f64, rng: &mut Rng) -> Vec<bool> {
    (0..n_layers).map(|_| rng.bernoulli(p)).collect()
}

/// Progressive schedule parameters. The global keep probability decays
/// exponentially from 1 toward a floor picked so the run-average relative
/// FLOPs matches a requested budget.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PldParams {
    pub gamma: f64,
    pub theta_floor: f64,
}

impl PldParams {
    pub const DEFAULT_GAMMA: f64 = 5.0;

    /// Average keep prob over depth is (1 + theta(t)) / 2, and the schedule
    /// average of theta(t) = floor + (1 - floor) e^(-gamma t) over t in
    /// [0, 1] is floor + (1 - floor)(1 - e^(-gamma))/gamma. Solving both for
    /// the requested budget pins the floor.
    pub fn for_budget(relative_flops: f64, gamma: f64) -> Result<Self> {
        if !(0.5..=1.0).contains(&relative_flops) {
            return Err(Error::Argument(format!(
                "pld budget {relative_flops} must lie in [0.5, 1]"
            )));
        }
        if gamma <= 0.0 {
            return Err(Error::Argument("pld gamma must be positive".into()));
        }
        let theta_avg = 2.0 * relative_flops - 1.0;
        let tail = (1.0 - (-gamma).exp()) / gamma;
        let floor = (theta_avg - tail) / (1.0 - tail);
        if !(0.0..=1.0).contains(&floor) {
            return Err(Error::Argument(format!(
                "pld budget {relative_flops} unreachable with gamma {gamma}"
            )));
        }
        Ok(PldParams {
            gamma,
            theta_floor: floor,
        })
    }

    fn theta(&self, iter_frac: f64) -> f64 {
        self.theta_floor + (1.0 - self.theta_floor) * (-self.gamma * iter_frac).exp()
    }
}

/// Keep probability for a layer at a depth fraction and iteration fraction:
/// 1 at the start of training, non-increasing in both arguments.
pub fn pld_keep_prob(layer_depth_frac: f64, iter_frac: f64, params: &PldParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&layer_depth_frac) || !(0.0..=1.0).contains(&iter_frac) {
        return Err(Error::Argument("pld fractions must lie in [0, 1]".into()));
    }
    let theta = params.theta(iter_frac);
    Ok(1.0 - layer_depth_frac * (1.0 - theta))
}

/// Keep decisions for one iteration of progressive layer dropping. Depth
/// fraction for layer i of n is (i + 1) / n, so the run-average keep prob
/// over layers is (1 + theta)/2 up to the 1/(2n) discretization.
pub fn pld_decisions(
    n_layers: usize,
    iter: u64,
    total: u64,
    params: &PldParams,
    rng: &mut Rng,
) -> Result<Vec<bool>> {
    let iter_frac = if total == 0 {
        0.0
    } else {
        iter as f64 / total as f64
    };
    let mut dropped = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let depth = (i + 1) as f64 / n_layers as f64;
        let keep = pld_keep_prob(depth, iter_frac, params)?;
        dropped.push(!rng.bernoulli(keep));
    }
    Ok(dropped)
}

/// One path-length probe.
#[derive(Debug, Clone, Serialize)]
pub struct PathSample {
    pub k: usize,
    pub grad_norm: f64,
    pub rep: usize,
}

/// Aggregate per path length.
#[derive(Debug, Clone, Serialize)]
pub struct PathLengthRow {
    pub k: usize,
    pub mean_norm: f64,
    /// C(n, k) / 2^n.
    pub weight: f64,
    pub weighted: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathAnalysis {
    pub n_layers: usize,
    pub reps: usize,
    pub samples: Vec<PathSample>,
    pub rows: Vec<PathLengthRow>,
}

/// For each requested path length k, sample `reps` subsets of k branches,
/// backpropagate through exactly those branches (identity elsewhere), and
/// record the gradient norm at the residual stream entering the first unit.
/// Totals weight the mean norms by the binomial share of length-k paths.
pub fn path_gradient_analysis(
    model: &Model,
    tokens: &TokenBatch,
    targets: &[u32],
    k_values: &[usize],
    reps: usize,
    rng: &mut Rng,
) -> Result<PathAnalysis> {
    if reps == 0 {
        return Err(Error::Argument("path analysis needs reps >= 1".into()));
    }
    let n = model.n_layers();
    for &k in k_values {
        if k > n {
            return Err(Error::Argument(format!(
                "path length {k} exceeds {n} branches"
            )));
        }
    }
    let mut meter = FlopsMeter::new();
    let all_kept = IterationPlan::baseline(n);
    let (logits, cache) = model.forward(tokens, &all_kept, &mut meter)?;
    let (_, loss_cache) = model.loss(&logits, targets, &mut meter)?;
    let dlogits = ops::cross_entropy_backward(&loss_cache, targets, &mut meter)?;

    let denom = 2f64.powi(n as i32);
    let mut samples = Vec::new();
    let mut rows = Vec::new();
    for &k in k_values {
        let mut sum = 0.0;
        for rep in 0..reps {
            let subset = rng.choose_distinct(n, k);
            let plan = IterationPlan::path_subset(n, &subset);
            let g = model.input_gradient(&cache, &plan, &dlogits, &mut meter)?;
            let norm = g.l2_norm();
            sum += norm;
            samples.push(PathSample { k, grad_norm: norm, rep });
        }
        let mean = sum / reps as f64;
        let weight_big = binomial(n as u64, k as u64);
        let weight = biguint_to_f64(&weight_big) / denom;
        rows.push(PathLengthRow {
            k,
            mean_norm: mean,
            weight,
            weighted: mean * weight,
        });
    }
    Ok(PathAnalysis {
        n_layers: n,
        reps,
        samples,
        rows,
    })
}

/// Exact input gradients for every branch subset of the model, and the full
/// gradient, computed from one shared forward. The sum of the subset path
/// gradients telescopes the residual backward product exactly.
pub fn enumerate_path_gradients(
    model: &Model,
    tokens: &TokenBatch,
    targets: &[u32],
) -> Result<(Vec<Tensor>, Tensor)> {
    let n = model.n_layers();
    if n > 16 {
        return Err(Error::Argument("subset enumeration capped at 16 branches".into()));
    }
    let mut meter = FlopsMeter::new();
    let all_kept = IterationPlan::baseline(n);
    let (logits, cache) = model.forward(tokens, &all_kept, &mut meter)?;
    let (_, loss_cache) = model.loss(&logits, targets, &mut meter)?;
    let dlogits = ops::cross_entropy_backward(&loss_cache, targets, &mut meter)?;

    let full = model.input_gradient(&cache, &all_kept, &dlogits, &mut meter)?;
    let mut subsets = Vec::with_capacity(1 << n);
    for mask in 0u32..(1 << n) {
        let subset: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let plan = IterationPlan::path_subset(n, &subset);
        subsets.push(model.input_gradient(&cache, &plan, &dlogits, &mut meter)?);
    }
    Ok((subsets, full))
}

/// Exact C(n, k).
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::ZERO;
    }
    let mut res = BigUint::one();
    for i in 0..k.min(n - k) {
        res = res * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    res
}

fn biguint_to_f64(v: &BigUint) -> f64 {
    v.to_string().parse::<f64>().unwrap_or(f64::INFINITY)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMethod {
    Freeze,
    DropBp,
}

/// Exact count of trainable submodules at a skip rate.
///
/// Freezing trains the 2^(n(1-p)) submodules drawn from the surviving upper
/// layers; stochastic backward drops reach every submodule of depth at most
/// n(1-p), of which there are sum C(n, i) for i up to that depth. Non-integer
/// depths floor.
pub fn submodule_count(n_layers: usize, p: f64, method: CountMethod) -> Result<BigUint> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Argument(format!("skip rate {p} outside [0, 1]")));
    }
    let exact = n_layers as f64 * (1.0 - p);
    // Tolerate representation error in p before flooring.
    let depth = ((exact + 1e-9).floor() as usize).min(n_layers);
    match method {
        CountMethod::Freeze => Ok(BigUint::from(2u32).pow(depth as u32)),
        CountMethod::DropBp => {
            let mut total = BigUint::ZERO;
            for i in 0..=depth {
                total += binomial(n_layers as u64, i as u64);
            }
            Ok(total)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_mask_examples() {
        assert_eq!(freeze_mask(8, 0.0).unwrap(), vec![true; 8]);
        assert_eq!(freeze_mask(8, 1.0).unwrap(), vec![false; 8]);
        let half = freeze_mask(8, 0.5).unwrap();
        assert_eq!(half[..4], [false; 4]);
        assert_eq!(half[4..], [true; 4]);
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(5, 2), BigUint::from(10u32));
        assert_eq!(binomial(64, 0), BigUint::one());
        assert_eq!(binomial(64, 8).to_string(), "4426165368");
        assert_eq!(binomial(3, 5), BigUint::ZERO);
    }

    #[test]
    fn submodule_count_table_values() {
        // 64 layers at skip rate 0.875: freezing keeps 2^8 submodules,
        // stochastic drops reach sum_{i<=8} C(64, i).
        let freeze = submodule_count(64, 0.875, CountMethod::Freeze).unwrap();
        assert_eq!(freeze, BigUint::from(256u32));
        let dropbp = submodule_count(64, 0.875, CountMethod::DropBp).unwrap();
        let direct: BigUint = (0..=8u64).map(|i| binomial(64, i)).sum();
        assert_eq!(dropbp, direct);
        assert!(dropbp > freeze);
    }

    #[test]
    fn submodule_count_hand_case() {
        assert_eq!(
            submodule_count(2, 0.5, CountMethod::DropBp).unwrap(),
            BigUint::from(3u32)
        );
        assert_eq!(
            submodule_count(2, 0.5, CountMethod::Freeze).unwrap(),
            BigUint::from(2u32)
        );
    }

    #[test]
    fn submodule_count_no_skip_is_power_of_two() {
        for n in [2usize, 4, 8] {
            let a = submodule_count(n, 0.0, CountMethod::Freeze).unwrap();
            let b = submodule_count(n, 0.0, CountMethod::DropBp).unwrap();
            let expect = BigUint::from(2u32).pow(n as u32);
            assert_eq!(a, expect);
            assert_eq!(b, expect);
        }
    }

    #[test]
    fn pld_schedule_shape() {
        let params = PldParams::for_budget(0.75, PldParams::DEFAULT_GAMMA).unwrap();
        // Progressive start: everything kept at iteration 0.
        for depth in [0.0, 0.3, 1.0] {
            assert_eq!(pld_keep_prob(depth, 0.0, &params).unwrap(), 1.0);
        }
        // Non-increasing in depth at fixed time.
        let shallow = pld_keep_prob(0.2, 0.7, &params).unwrap();
        let deep = pld_keep_prob(0.9, 0.7, &params).unwrap();
        assert!(deep <= shallow);
        // Non-increasing in time at fixed depth.
        let early = pld_keep_prob(0.5, 0.1, &params).unwrap();
        let late = pld_keep_prob(0.5, 0.9, &params).unwrap();
        assert!(late <= early);
    }

    #[test]
    fn pld_budget_integrates_to_target() {
        // Numerically integrate the layer-averaged keep prob over training;
        // it should equal the requested relative FLOPs.
        for budget in [0.75, 0.9] {
            let params = PldParams::for_budget(budget, PldParams::DEFAULT_GAMMA).unwrap();
            let steps = 200_000;
            let mut acc = 0.0;
            for s in 0..steps {
                let t = (s as f64 + 0.5) / steps as f64;
                let theta = params.theta(t);
                acc += (1.0 + theta) / 2.0;
            }
            let avg = acc / steps as f64;
            assert!((avg - budget).abs() < 1e-4, "avg {avg} vs {budget}");
        }
    }

    #[test]
    fn binomial_weights_sum_to_one() {
        for n in [3usize, 6, 11] {
            let denom = 2f64.powi(n as i32);
            let sum: f64 = (0..=n)
                .map(|k| biguint_to_f64(&binomial(n as u64, k as u64)) / denom)
                .sum();
            assert_eq!(sum, 1.0);
        }
    }
}
