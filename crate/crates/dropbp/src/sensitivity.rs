//! Layer sensitivity and drop-rate allocation.
//!
//! A layer's sensitivity is the summed squared change in per-group parameter
//! gradient L2 norms between a full backward and a backward with only that
//! layer dropped: one baseline pass plus one probe pass per layer, 2n+1
//! backward passes total, all sharing a single all-kept forward cache.
//! Parameters are observed, never updated.
//!
//! Allocation then spreads grid drop rates over layers to meet a FLOPs
//! budget while removing as little expected sensitivity mass as possible:
//! starting from zero, the rate of the layer whose 0.1 increment adds the
//! least expected sensitivity (0.1 * S_i) is bumped until the weighted keep
//! cost fits the target. Ties prefer the lowest current rate, then the
//! lowest index, which spreads drops evenly across equal layers.

use serde::Serialize;

use crate::dropbp::{DropRates, GridRate, WarmupSchedule};
use crate::error::{Error, Result};
use crate::flops::FlopsMeter;
use crate::model::{IterationPlan, Model, TokenBatch};

/// Per-layer sensitivities plus provenance.
#[derive(Debug, Clone, Serialize)]
pub struct SensitivityVector {
    pub values: Vec<f64>,
    pub batch_id: u64,
    pub iteration: u64,
}

impl SensitivityVector {
    pub fn new(values: Vec<f64>, batch_id: u64, iteration: u64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric("sensitivities must be finite and >= 0".into()));
        }
        Ok(SensitivityVector {
            values,
            batch_id,
            iteration,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-layer backward FLOPs feeding the budget constraint.
#[derive(Debug, Clone, Serialize)]
pub struct FlopsProfile {
    values: Vec<f64>,
}

impl FlopsProfile {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Argument("layer flops must be finite and >= 0".into()));
        }
        Ok(FlopsProfile { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Budget: keep at most (1 - p_avg) of the total backward flops.
    pub fn target(&self, p_avg: f64) -> f64 {
        (1.0 - p_avg) * self.total()
    }
}

/// Gradient norms per parameter group for one backward configuration.
fn gradient_norms(
    model: &Model,
    cache: &crate::model::ActivationCache,
    dlogits: &crate::tensor::Tensor,
    plan: &IterationPlan,
    meter: &mut FlopsMeter,
) -> Result<Vec<(String, f64)>> {
    let grads = model.backward(cache, plan, dlogits, meter)?;
    Ok(grads.norms())
}

/// One baseline backward plus one probe per layer, per the sensitivity
/// definition. The model is read-only; the meter sees 2n+1 backward passes
/// and a single forward.
pub fn compute_sensitivities(
    model: &Model,
    tokens: &TokenBatch,
    targets: &[u32],
    batch_id: u64,
    iteration: u64,
    meter: &mut FlopsMeter,
) -> Result<SensitivityVector> {
    let n_layers = model.n_layers();
    let all_kept = IterationPlan::baseline(n_layers);
    let (logits, cache) = model.forward(tokens, &all_kept, meter)?;
    let (_, loss_cache) = model.loss(&logits, targets, meter)?;
    let dlogits = crate::ops::cross_entropy_backward(&loss_cache, targets, meter)?;

    let baseline = gradient_norms(model, &cache, &dlogits, &all_kept, meter)?;

    let mut values = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let mut dropped = vec![false; n_layers];
        dropped[layer] = true;
        let plan = IterationPlan::backward_drops(&dropped);
        let probe = gradient_norms(model, &cache, &dlogits, &plan, meter)
            .map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("sensitivity probe for layer {layer}: {msg}"))
                }
                other => other,
            })?;
        if probe.len() != baseline.len() {
            return Err(Error::State(
                "sensitivity probe produced a different group set".into(),
            ));
        }
        let mut s = 0.0;
        for ((name_a, n0), (name_b, nl)) in baseline.iter().zip(&probe) {
            debug_assert_eq!(name_a, name_b);
            let d = n0 - nl;
            s += d * d;
        }
        values.push(s);
    }
    SensitivityVector::new(values, batch_id, iteration)
}

/// Expected sensitivity removed by a rate vector: sum p_i * S_i, accumulated
/// in tenths for determinism.
pub fn added_sensitivity(rates: &DropRates, s: &SensitivityVector) -> f64 {
    rates
        .rates()
        .iter()
        .zip(&s.values)
        .map(|(r, &si)| f64::from(r.tenths()) * 0.1 * si)
        .sum()
}

/// Greedy grid allocation under the FLOPs budget.
pub fn allocate(s: &SensitivityVector, f: &FlopsProfile, p_avg: f64) -> Result<DropRates> {
    if s.len() != f.len() {
        return Err(Error::Argument(format!(
            "sensitivities cover {} layers, flops profile {}",
            s.len(),
            f.len()
        )));
    }
    if !(0.0..=1.0).contains(&p_avg) {
        return Err(Error::Argument(format!(
            "target average rate {p_avg} makes the budget infeasible"
        )));
    }
    let target = f.target(p_avg);
    let mut rates = DropRates::zeros(s.len());
    rates.set_target(p_avg);

    while rates.weighted_keep(f.values()) > target {
        let mut best: Option<(f64, u8, usize)> = None;
        for i in 0..s.len() {
            let tenths = rates.get(i).tenths();
            if tenths >= 10 {
                continue;
            }
            let key = (s.values[i], tenths, i);
            let better = match &best {
                None => true,
                Some((bs, bt, bi)) => {
                    key.0 < *bs || (key.0 == *bs && (key.1, key.2) < (*bt, *bi))
                }
            };
            if better {
                best = Some(key);
            }
        }
        match best {
            Some((_, _, i)) => rates.bump(i),
            None => {
                // Every layer saturated; feasible because target >= 0.
                break;
            }
        }
    }
    Ok(rates)
}

/// Record of the one-time rate reallocation.
#[derive(Debug, Clone, Serialize)]
pub struct AllocatorEvent {
    pub iteration: u64,
    pub sensitivities: Vec<f64>,
    pub layer_flops: Vec<f64>,
    pub p_avg: f64,
    pub rates: Vec<f64>,
    pub added_expected_sensitivity: f64,
    pub batch_id: u64,
    /// Cost of the 2n+1 probe passes (forward + backward flops).
    pub probe_flops: u64,
}

/// Drop-rate state across a run: uniform rates during warmup, then a single
/// sensitivity-based reallocation at the boundary.
#[derive(Debug, Clone)]
pub struct DropBpController {
    pub schedule: WarmupSchedule,
    pub p_avg: f64,
    pub rates: DropRates,
    /// Grid value actually used for warmup when p_avg is off-grid.
    pub warmup_rate: GridRate,
    reallocated: bool,
}

impl DropBpController {
    pub fn new(n_layers: usize, p_avg: f64, schedule: WarmupSchedule) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_avg) {
            return Err(Error::Argument(format!("p_avg {p_avg} outside [0, 1]")));
        }
        let warmup_rate = GridRate::nearest(p_avg);
        let mut rates = DropRates::new(vec![warmup_rate; n_layers], p_avg)?;
        rates.set_target(p_avg);
        Ok(DropBpController {
            schedule,
            p_avg,
            rates,
            warmup_rate,
            reallocated: false,
        })
    }

    /// Whether warmup had to round the target onto the grid.
    pub fn warmup_rounded(&self) -> bool {
        (self.warmup_rate.value() - self.p_avg).abs() > 1e-12
    }

    pub fn reallocated(&self) -> bool {
        self.reallocated
    }

    /// At exactly the warmup boundary, compute sensitivities on the given
    /// held-out batch and swap in allocated rates. Any other iteration is a
    /// no-op; the swap happens at most once per run.
    #[allow(clippy::too_many_arguments)]
    pub fn maybe_reallocate(
        &mut self,
        iteration: u64,
        model: &Model,
        tokens: &TokenBatch,
        targets: &[u32],
        batch_id: u64,
        profile: &FlopsProfile,
    ) -> Result<Option<AllocatorEvent>> {
        if self.reallocated || iteration != self.schedule.boundary() {
            return Ok(None);
        }
        let mut probe_meter = FlopsMeter::new();
        let s = compute_sensitivities(model, tokens, targets, batch_id, iteration, &mut probe_meter)?;
        let rates = allocate(&s, profile, self.p_avg)?;
        let event = AllocatorEvent {
            iteration,
            sensitivities: s.values.clone(),
            layer_flops: profile.values().to_vec(),
            p_avg: self.p_avg,
            rates: rates.values(),
            added_expected_sensitivity: added_sensitivity(&rates, &s),
            batch_id,
            probe_flops: probe_meter.total(),
        };
        self.rates = rates;
        self.reallocated = true;
        Ok(Some(event))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(values: Vec<f64>) -> SensitivityVector {
        SensitivityVector::new(values, 0, 0).unwrap()
    }

    #[test]
    fn saturates_insensitive_layers_first() {
        let s = sv(vec![5.0, 1.0, 1.0]);
        let f = FlopsProfile::new(vec![1.0, 1.0, 1.0]).unwrap();
        let rates = allocate(&s, &f, 2.0 / 3.0).unwrap();
        assert_eq!(rates.values(), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn symmetric_instance_round_robins() {
        let s = sv(vec![2.0; 4]);
        let f = FlopsProfile::new(vec![3.0; 4]).unwrap();
        let rates = allocate(&s, &f, 0.5).unwrap();
        assert_eq!(rates.values(), vec![0.5; 4]);
    }

    #[test]
    fn zero_target_is_identity() {
        let s = sv(vec![1.0, 2.0]);
        let f = FlopsProfile::new(vec![1.0, 1.0]).unwrap();
        let rates = allocate(&s, &f, 0.0).unwrap();
        assert_eq!(rates.values(), vec![0.0, 0.0]);
    }

    #[test]
    fn infeasible_budget_rejected() {
        let s = sv(vec![1.0]);
        let f = FlopsProfile::new(vec![1.0]).unwrap();
        assert!(allocate(&s, &f, 1.5).is_err());
        assert!(allocate(&s, &f, -0.1).is_err());
    }

    #[test]
    fn budget_always_satisfied() {
        // Deterministic spread of heterogeneous instances.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for trial in 0..500 {
            let n = 1 + trial % 12;
            let s = sv((0..n).map(|_| next() * 10.0).collect());
            let f = FlopsProfile::new((0..n).map(|_| 0.1 + next() * 5.0).collect()).unwrap();
            let p_avg = next();
            let rates = allocate(&s, &f, p_avg).unwrap();
            assert!(rates.weighted_keep(f.values()) <= f.target(p_avg));
        }
    }

    #[test]
    fn allocation_is_pure() {
        let s = sv(vec![0.3, 0.9, 0.1, 0.5]);
        let f = FlopsProfile::new(vec![2.0, 1.0, 4.0, 1.0]).unwrap();
        let a = allocate(&s, &f, 0.6).unwrap();
        let b = allocate(&s, &f, 0.6).unwrap();
        assert_eq!(a, b);
    }
}
