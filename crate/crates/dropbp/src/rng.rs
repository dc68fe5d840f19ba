//! Deterministic random streams.
//!
//! Every source of randomness in a run is derived from a single 64-bit seed
//! plus a domain tag and an index (usually the iteration number). Two runs
//! with the same seed draw bit-identical values regardless of how streams
//! are interleaved, because each (domain, index) pair owns a private ChaCha
//! stream.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Purpose tags for derived streams. Keeping them distinct means e.g. drop
/// decisions never perturb data order or parameter init.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Init = 1,
    TrainData = 2,
    ValData = 3,
    Decisions = 4,
    Analysis = 5,
    Dataset = 6,
}

/// Deterministic random stream with an explicit seed.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream for (seed, domain, index). Identical arguments produce an
    /// identical stream no matter the call order in the program.
    pub fn substream(seed: u64, domain: Domain, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(((domain as u64) << 48) ^ index);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        debug_assert!((0.0..=1.0).contains(&p));
        self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        if std == 0.0 {
            return mean;
        }
        Normal::new(mean, std).expect("valid normal").sample(&mut self.inner)
    }

    pub fn fill_normal(&mut self, out: &mut [f64], std: f64) {
        for v in out.iter_mut() {
            *v = self.normal(0.0, std);
        }
    }

    /// Sample k distinct indices from 0..n (k <= n).
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool.sort_unstable();
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_are_order_independent() {
        let mut x = Rng::substream(7, Domain::Decisions, 3);
        let first = x.next_u64();
        // Interleave unrelated draws, then re-derive the same stream.
        let _ = Rng::substream(7, Domain::TrainData, 0).next_u64();
        let mut y = Rng::substream(7, Domain::Decisions, 3);
        assert_eq!(first, y.next_u64());
    }

    #[test]
    fn distinct_domains_differ() {
        let a = Rng::substream(1, Domain::Init, 0).next_u64();
        let b = Rng::substream(1, Domain::TrainData, 0).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn choose_distinct_is_sorted_unique() {
        let mut r = Rng::new(5);
        for _ in 0..50 {
            let picked = r.choose_distinct(10, 4);
            assert_eq!(picked.len(), 4);
            for w in picked.windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }
}
