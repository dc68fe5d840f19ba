//! Synthetic datasets: a byte-level language-modeling corpus and a copy
//! task whose loss is confined to the deterministic copy region.

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::ops::IGNORE_TARGET;
use crate::rng::{Domain, Rng};

/// Bundled plain-text corpus for the byte-level task.
pub const BUNDLED_CORPUS: &str = include_str!("../data/corpus.txt");

/// Stream index reserved for the held-out sensitivity batch.
pub const SENSITIVITY_STREAM: u64 = u64::MAX;

fn default_train_fraction() -> f64 {
    0.9
}

fn default_pool() -> usize {
    4096
}

fn default_val_size() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Next-byte prediction over a text corpus. Train and validation windows
    /// come from disjoint regions of the text.
    CharLm {
        /// Path to a text file; the bundled corpus when absent.
        #[serde(default)]
        corpus: Option<PathBuf>,
        seq_len: usize,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
    /// Echo a random pattern after a separator; loss counts only the copy
    /// positions, so the optimal loss is zero.
    CopyTask {
        data_vocab: usize,
        pattern_len: usize,
        #[serde(default = "default_pool")]
        train_pool: usize,
        #[serde(default = "default_val_size")]
        val_size: usize,
    },
}

impl DatasetSpec {
    /// Model input length this dataset produces.
    pub fn seq_len(&self) -> usize {
        match self {
            DatasetSpec::CharLm { seq_len, .. } => *seq_len,
            DatasetSpec::CopyTask { pattern_len, .. } => 2 * pattern_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            DatasetSpec::CharLm { .. } => 256,
            DatasetSpec::CopyTask { data_vocab, .. } => data_vocab + 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Source {
    Char {
        bytes: Vec<u8>,
        train_end: usize,
        seq_len: usize,
    },
    Copy {
        pool: Vec<Vec<u32>>,
        val: Vec<Vec<u32>>,
        pattern_len: usize,
        data_vocab: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab_size: usize,
    pub seq_len: usize,
    source: Source,
}

impl Dataset {
    pub fn build(spec: &DatasetSpec, seed: u64) -> Result<Self> {
        match spec {
            DatasetSpec::CharLm {
                corpus,
                seq_len,
                train_fraction,
            } => {
                let text = match corpus {
                    Some(path) => std::fs::read_to_string(path)?,
                    None => BUNDLED_CORPUS.to_string(),
                };
                let bytes = text.into_bytes();
                if bytes.is_empty() {
                    return Err(Error::Input("corpus is empty".into()));
                }
                if !(0.0..1.0).contains(train_fraction) {
                    return Err(Error::Argument("train fraction must lie in [0, 1)".into()));
                }
                let train_end = (bytes.len() as f64 * train_fraction) as usize;
                // Both regions must fit at least one window.
                if train_end < seq_len + 1 || bytes.len() - train_end < seq_len + 1 {
                    return Err(Error::Input(format!(
                        "corpus of {} bytes too small for seq_len {seq_len}",
                        bytes.len()
                    )));
                }
                Ok(Dataset {
                    vocab_size: 256,
                    seq_len: *seq_len,
                    source: Source::Char {
                        bytes,
                        train_end,
                        seq_len: *seq_len,
                    },
                })
            }
            DatasetSpec::CopyTask {
                data_vocab,
                pattern_len,
                train_pool,
                val_size,
            } => {
                if *data_vocab < 2 || *pattern_len == 0 || *train_pool == 0 || *val_size == 0 {
                    return Err(Error::Argument("degenerate copy-task spec".into()));
                }
                let mut pool_rng = Rng::substream(seed, Domain::Dataset, 0);
                let mut seen = HashSet::new();
                let mut pool = Vec::with_capacity(*train_pool);
                while pool.len() < *train_pool {
                    let p = sample_pattern(&mut pool_rng, *pattern_len, *data_vocab);
                    if seen.insert(p.clone()) {
                        pool.push(p);
                    }
                }
                // Validation patterns are rejected against the train pool, so
                // the split is disjoint by construction.
                let mut val_rng = Rng::substream(seed, Domain::Dataset, 1);
                let mut val = Vec::with_capacity(*val_size);
                while val.len() < *val_size {
                    let p = sample_pattern(&mut val_rng, *pattern_len, *data_vocab);
                    if seen.insert(p.clone()) {
                        val.push(p);
                    }
                }
                Ok(Dataset {
                    vocab_size: data_vocab + 1,
                    seq_len: 2 * pattern_len,
                    source: Source::Copy {
                        pool,
                        val,
                        pattern_len: *pattern_len,
                        data_vocab: *data_vocab,
                    },
                })
            }
        }
    }

    /// Deterministic training batch for an iteration.
    pub fn train_batch(&self, iter: u64, batch: usize, seed: u64) -> Result<(TokenBatch, Vec<u32>)> {
        let mut rng = Rng::substream(seed, Domain::TrainData, iter);
        self.batch_from(&mut rng, batch, Split::Train)
    }

    /// Fixed validation set, chunked into batches.
    pub fn val_batches(&self, batch: usize, count: usize, seed: u64) -> Result<Vec<(TokenBatch, Vec<u32>)>> {
        (0..count)
            .map(|i| {
                let mut rng = Rng::substream(seed, Domain::ValData, i as u64);
                self.batch_from(&mut rng, batch, Split::Val)
            })
            .collect()
    }

    /// Held-out batch reserved for the sensitivity probe; drawing it leaves
    /// the training stream untouched.
    pub fn sensitivity_batch(&self, batch: usize, seed: u64) -> Result<(TokenBatch, Vec<u32>)> {
        let mut rng = Rng::substream(seed, Domain::ValData, SENSITIVITY_STREAM);
        self.batch_from(&mut rng, batch, Split::Val)
    }

    fn batch_from(&self, rng: &mut Rng, batch: usize, split: Split) -> Result<(TokenBatch, Vec<u32>)> {
        if batch == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        let mut ids = Vec::with_capacity(batch * self.seq_len);
        let mut targets = Vec::with_capacity(batch * self.seq_len);
        for _ in 0..batch {
            match &self.source {
                Source::Char {
                    bytes,
                    train_end,
                    seq_len,
                } => {
                    let (lo, hi) = match split {
                        Split::Train => (0usize, train_end - seq_len - 1),
                        Split::Val => (*train_end, bytes.len() - seq_len - 1),
                    };
                    let start = lo + rng.below(hi - lo + 1);
                    let window = &bytes[start..start + seq_len + 1];
                    ids.extend(window[..*seq_len].iter().map(|&b| u32::from(b)));
                    targets.extend(window[1..].iter().map(|&b| u32::from(b)));
                }
                Source::Copy {
                    pool,
                    val,
                    pattern_len,
                    data_vocab,
                } => {
                    let pattern = match split {
                        Split::Train => &pool[rng.below(pool.len())],
                        Split::Val => &val[rng.below(val.len())],
                    };
                    let sep = *data_vocab as u32;
                    // sequence: pattern, separator, pattern
                    let mut seq = Vec::with_capacity(2 * pattern_len + 1);
                    seq.extend_from_slice(pattern);
                    seq.push(sep);
                    seq.extend_from_slice(pattern);
                    ids.extend_from_slice(&seq[..2 * pattern_len]);
                    for (i, &next) in seq[1..].iter().enumerate() {
                        targets.push(if i < *pattern_len { IGNORE_TARGET } else { next });
                    }
                }
            }
        }
        Ok((TokenBatch::new(ids, batch, self.seq_len)?, targets))
    }

    /// Content hashes of the train-side examples (copy task) or the train
    /// region windows (char task), for disjointness checks.
    pub fn train_example_hashes(&self) -> HashSet<u64> {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::{Hash, Hasher};
        let mut set = HashSet::new();
        match &self.source {
            Source::Copy { pool, .. } => {
                for p in pool {
                    let mut h = DefaultHasher::new();
                    p.hash(&mut h);
                    set.insert(h.finish());
                }
            }
            Source::Char { .. } => {}
        }
        set
    }

    pub fn val_example_hashes(&self) -> HashSet<u64> {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::{Hash, Hasher};
        let mut set = HashSet::new();
        if let Source::Copy { val, .. } = &self.source {
            for p in val {
                let mut h = DefaultHasher::new();
                p.hash(&mut h);
                set.insert(h.finish());
            }
        }
        set
    }
}

#[derive(Clone, Copy)]
enum Split {
    Train,
    Val,
}

fn sample_pattern(rng: &mut Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.below(vocab) as u32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn copy_spec() -> DatasetSpec {
        DatasetSpec::CopyTask {
            data_vocab: 12,
            pattern_len: 6,
            train_pool: 128,
            val_size: 32,
        }
    }

    #[test]
    fn copy_batches_are_deterministic() {
        let d = Dataset::build(&copy_spec(), 5).unwrap();
        let (a, ta) = d.train_batch(3, 4, 5).unwrap();
        let (b, tb) = d.train_batch(3, 4, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn copy_split_is_disjoint() {
        let d = Dataset::build(&copy_spec(), 11).unwrap();
        let train = d.train_example_hashes();
        let val = d.val_example_hashes();
        assert!(train.is_disjoint(&val));
        assert_eq!(val.len(), 32);
    }

    #[test]
    fn copy_targets_mask_the_prefix() {
        let d = Dataset::build(&copy_spec(), 7).unwrap();
        let (batch, targets) = d.train_batch(0, 1, 7).unwrap();
        let l = 6;
        assert_eq!(batch.seq, 2 * l);
        // Prefix positions carry no loss.
        assert!(targets[..l].iter().all(|&t| t == IGNORE_TARGET));
        // Copy positions predict the pattern, i.e. the first half of input.
        for i in 0..l - 1 {
            assert_eq!(targets[l + 1 + i], batch.ids[i + 1]);
        }
        assert_eq!(targets[l], batch.ids[0]);
    }

    #[test]
    fn copy_task_is_perfectly_predictable() {
        // A predictor that reads off the first half achieves exactly zero
        // loss on the counted positions: targets there are input tokens.
        let d = Dataset::build(&copy_spec(), 13).unwrap();
        let (batch, targets) = d.train_batch(1, 2, 13).unwrap();
        let l = 6;
        for b in 0..batch.batch {
            for i in 0..l {
                let t = targets[b * batch.seq + l + i];
                let source = batch.ids[b * batch.seq + i];
                assert_eq!(t, source);
            }
        }
    }

    #[test]
    fn char_vocab_fits_bytes() {
        let spec = DatasetSpec::CharLm {
            corpus: None,
            seq_len: 32,
            train_fraction: 0.9,
        };
        let d = Dataset::build(&spec, 1).unwrap();
        assert_eq!(d.vocab_size, 256);
        let (batch, targets) = d.train_batch(0, 2, 1).unwrap();
        assert!(batch.ids.iter().all(|&t| t < 256));
        assert!(targets.iter().all(|&t| t < 256));
    }

    #[test]
    fn char_regions_do_not_overlap() {
        let spec = DatasetSpec::CharLm {
            corpus: None,
            seq_len: 16,
            train_fraction: 0.8,
        };
        let d = Dataset::build(&spec, 2).unwrap();
        if let Source::Char { bytes, train_end, seq_len } = &d.source {
            // highest train window end stays at or below the val region start
            let max_train_start = train_end - seq_len - 1;
            assert!(max_train_start + seq_len + 1 <= *train_end);
            assert!(train_end + seq_len + 1 <= bytes.len());
        } else {
            unreachable!();
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        let dir = std::env::temp_dir().join("dropbp_empty_corpus_test.txt");
        std::fs::write(&dir, "").unwrap();
        let spec = DatasetSpec::CharLm {
            corpus: Some(dir.clone()),
            seq_len: 8,
            train_fraction: 0.9,
        };
        assert!(Dataset::build(&spec, 0).is_err());
        let _ = std::fs::remove_file(dir);
    }
}
