//! The drop-backward mechanism: per-layer drop rates on a 0.1 grid,
//! per-iteration Bernoulli decisions, and the warmup schedule that switches
//! from uniform rates to sensitivity-allocated ones.
//!
//! Rates are stored as integer tenths so grid membership is exact. The
//! target average rate is kept separately at full precision: individual
//! rates live on the grid, while the FLOPs budget uses the exact target, so
//! an off-grid average like 0.875 is realizable by mixing grid rates even
//! though no single layer can hold it.
//!
//! Kept layers are not rescaled. Dropping is plain skipping of the branch
//! backward, not inverted dropout: the gradient of a kept layer is exactly
//! the gradient it would have in ordinary training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::IterationPlan;
use crate::rng::{Domain, Rng};

/// A probability on the 0.1 grid, stored as tenths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridRate(u8);

impl GridRate {
    pub const ZERO: GridRate = GridRate(0);
    pub const ONE: GridRate = GridRate(10);

    pub fn from_tenths(t: u8) -> Result<Self> {
        if t > 10 {
            return Err(Error::Argument(format!("rate {t}/10 above 1.0")));
        }
        Ok(GridRate(t))
    }

    /// Accept a float only if it sits exactly on the grid.
    pub fn from_value(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Argument(format!("drop rate {p} outside [0, 1]")));
        }
        let tenths = p * 10.0;
        if (tenths - tenths.round()).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "drop rate {p} is off the 0.1 grid"
            )));
        }
        Ok(GridRate(tenths.round() as u8))
    }

    /// Nearest grid point (used only for the warmup's uniform rate; the
    /// rounding is reported to the caller for logging).
    pub fn nearest(p: f64) -> Self {
        let t = (p.clamp(0.0, 1.0) * 10.0).round() as u8;
        GridRate(t.min(10))
    }

    pub fn tenths(&self) -> u8 {
        self.0
    }

    pub fn value(&self) -> f64 {
        f64::from(self.0) / 10.0
    }
}

/// Per-layer drop rates plus the target average that set their budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRates {
    rates: Vec<GridRate>,
    target_avg: f64,
}

impl DropRates {
    pub fn new(rates: Vec<GridRate>, target_avg: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&target_avg) {
            return Err(Error::Argument(format!(
                "target average {target_avg} outside [0, 1]"
            )));
        }
        Ok(DropRates { rates, target_avg })
    }

    /// All layers at the same grid rate. Off-grid averages are rejected;
    /// warmup callers round first via `GridRate::nearest` and log it.
    pub fn uniform(n_layers: usize, p_avg: f64) -> Result<Self> {
        let rate = GridRate::from_value(p_avg)?;
        DropRates::new(vec![rate; n_layers], p_avg)
    }

    pub fn zeros(n_layers: usize) -> Self {
        DropRates {
            rates: vec![GridRate::ZERO; n_layers],
            target_avg: 0.0,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.rates.len()
    }

    pub fn rates(&self) -> &[GridRate] {
        &self.rates
    }

    pub fn values(&self) -> Vec<f64> {
        self.rates.iter().map(GridRate::value).collect()
    }

    pub fn target_avg(&self) -> f64 {
        self.target_avg
    }

    pub fn get(&self, i: usize) -> GridRate {
        self.rates[i]
    }

    pub(crate) fn bump(&mut self, i: usize) {
        debug_assert!(self.rates[i].0 < 10);
        self.rates[i].0 += 1;
    }

    pub(crate) fn set_target(&mut self, target: f64) {
        self.target_avg = target;
    }

    /// Plain average of the per-layer rates.
    pub fn mean(&self) -> f64 {
        if self.rates.is_empty() {
            return 0.0;
        }
        self.rates.iter().map(|r| r.value()).sum::<f64>() / self.rates.len() as f64
    }

    /// Sum of (1 - p_i) * w_i. Both the allocator's stopping rule and the
    /// budget checks use this exact accumulation, left to right.
    pub fn weighted_keep(&self, weights: &[f64]) -> f64 {
        debug_assert_eq!(weights.len(), self.rates.len());
        self.rates
            .iter()
            .zip(weights)
            .map(|(r, &w)| f64::from(10 - r.tenths()) * 0.1 * w)
            .sum()
    }
}

/// Sampled drop decisions for one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropDecisions {
    dropped: Vec<bool>,
    pub iteration: u64,
}

impl DropDecisions {
    pub fn none(n_layers: usize) -> Self {
        DropDecisions {
            dropped: vec![false; n_layers],
            iteration: 0,
        }
    }

    pub fn dropped(&self) -> &[bool] {
        &self.dropped
    }

    pub fn is_dropped(&self, layer: usize) -> bool {
        self.dropped[layer]
    }

    pub fn n_dropped(&self) -> usize {
        self.dropped.iter().filter(|&&d| d).count()
    }

    pub fn plan(&self) -> IterationPlan {
        IterationPlan::backward_drops(&self.dropped)
    }
}

/// Independent Bernoulli(p_i) per layer, resampled every iteration and
/// deterministic given (seed, iteration) regardless of call order.
pub fn sample_decisions(rates: &DropRates, iteration: u64, seed: u64) -> DropDecisions {
    let mut rng = Rng::substream(seed, Domain::Decisions, iteration);
    // uniform() is in [0, 1), so p = 0 never drops and p = 1 always does.
    let dropped = rates.rates().iter().map(|r| rng.bernoulli(r.value())).collect();
    DropDecisions {
        dropped,
        iteration,
    }
}

/// Training phase relative to the warmup boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Uniform,
    SensitivityBased,
}

/// Uniform rates for the first fraction of training, sensitivity-based
/// rates afterwards; the switch happens exactly once.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub total_iters: u64,
    pub warmup_fraction: f64,
}

impl WarmupSchedule {
    pub const DEFAULT_FRACTION: f64 = 0.1;

    pub fn new(total_iters: u64, warmup_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&warmup_fraction) {
            return Err(Error::Argument(format!(
                "warmup fraction {warmup_fraction} outside [0, 1]"
            )));
        }
        Ok(WarmupSchedule {
            total_iters,
            warmup_fraction,
        })
    }

    /// First iteration of the sensitivity-based phase.
    pub fn boundary(&self) -> u64 {
        (self.warmup_fraction * self.total_iters as f64).floor() as u64
    }

    pub fn phase(&self, iteration: u64) -> Phase {
        if iteration < self.boundary() {
            Phase::Uniform
        } else {
            Phase::SensitivityBased
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_membership() {
        assert_eq!(GridRate::from_value(0.5).unwrap().tenths(), 5);
        assert_eq!(GridRate::from_value(1.0).unwrap(), GridRate::ONE);
        assert!(GridRate::from_value(0.875).is_err());
        assert!(GridRate::from_value(-0.1).is_err());
        assert_eq!(GridRate::nearest(0.875).tenths(), 9);
    }

    #[test]
    fn uniform_rate_examples() {
        let r = DropRates::uniform(4, 0.5).unwrap();
        assert_eq!(r.values(), vec![0.5; 4]);
        let r = DropRates::uniform(2, 0.0).unwrap();
        assert_eq!(r.values(), vec![0.0; 2]);
        assert!(DropRates::uniform(64, 0.875).is_err());
    }

    #[test]
    fn degenerate_rates_never_or_always_drop() {
        let never = DropRates::uniform(6, 0.0).unwrap();
        let always = DropRates::uniform(6, 1.0).unwrap();
        for iter in 0..200 {
            assert_eq!(sample_decisions(&never, iter, 3).n_dropped(), 0);
            assert_eq!(sample_decisions(&always, iter, 3).n_dropped(), 6);
        }
    }

    #[test]
    fn decisions_deterministic_in_seed_and_iter() {
        let rates = DropRates::uniform(8, 0.5).unwrap();
        let a = sample_decisions(&rates, 17, 99);
        let b = sample_decisions(&rates, 17, 99);
        assert_eq!(a, b);
        let c = sample_decisions(&rates, 18, 99);
        assert_ne!(a.iteration, c.iteration);
    }

    #[test]
    fn empirical_frequency_concentrates() {
        let rates = DropRates::uniform(4, 0.5).unwrap();
        let iters = 10_000u64;
        let mut counts = vec![0u64; 4];
        for it in 0..iters {
            let d = sample_decisions(&rates, it, 1234);
            for (c, &dropped) in counts.iter_mut().zip(d.dropped()) {
                if dropped {
                    *c += 1;
                }
            }
        }
        for &c in &counts {
            let freq = c as f64 / iters as f64;
            assert!((0.48..=0.52).contains(&freq), "frequency {freq}");
        }
    }

    #[test]
    fn expected_executed_layers() {
        // Expected backward-executed layers per iteration is sum(1 - p_i).
        let mut rates = DropRates::zeros(5);
        for (i, t) in [2u8, 4, 6, 8, 10].into_iter().enumerate() {
            for _ in 0..t {
                rates.bump(i);
            }
        }
        let expect: f64 = rates.values().iter().map(|p| 1.0 - p).sum();
        let iters = 10_000u64;
        let mut executed = 0u64;
        for it in 0..iters {
            let d = sample_decisions(&rates, it, 7);
            executed += (5 - d.n_dropped()) as u64;
        }
        let mean = executed as f64 / iters as f64;
        assert!((mean - expect).abs() / expect < 0.02, "mean {mean} vs {expect}");
    }

    #[test]
    fn warmup_boundary() {
        let s = WarmupSchedule::new(2000, 0.1).unwrap();
        assert_eq!(s.boundary(), 200);
        assert_eq!(s.phase(199), Phase::Uniform);
        assert_eq!(s.phase(200), Phase::SensitivityBased);
    }
}
