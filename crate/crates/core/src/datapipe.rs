//! Load-aware epoch planning: samples are bucketed by token-grid shape,
//! shuffled within buckets, interleaved across buckets in proportion to
//! their remaining size, cut into homogeneous batches and spread over
//! logical workers by token count.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub sample: usize,
    /// Electrode count C.
    pub channels: usize,
    /// Patch count p; samples of one batch must agree on it too.
    pub patches: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bucket {
    pub channel_count: usize,
    pub n_patches: usize,
    pub samples: Vec<usize>,
}

/// Samples of one epoch in visiting order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub order: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub id: usize,
    pub channel_count: usize,
    pub n_patches: usize,
    pub samples: Vec<usize>,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.samples.len() * self.channel_count * self.n_patches
    }
}

pub fn buckets(index: &[IndexEntry]) -> Vec<Bucket> {
    let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for e in index {
        map.entry((e.channels, e.patches)).or_default().push(e.sample);
    }
    map.into_iter()
        .map(|((c, p), samples)| Bucket {
            channel_count: c,
            n_patches: p,
            samples,
        })
        .collect()
}

/// Every sample exactly once. Within-bucket order is a uniform permutation;
/// the next bucket is drawn with probability proportional to its number of
/// not-yet-emitted samples.
pub fn bucket_shuffle(index: &[IndexEntry], seed: u64) -> Result<EpochPlan> {
    if index.is_empty() {
        return Err(invalid("cannot plan an epoch over an empty index"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bs = buckets(index);
    for b in &mut bs {
        b.samples.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; bs.len()];
    let mut remaining = index.len();
    let mut order = Vec::with_capacity(index.len());
    while remaining > 0 {
        let mut pick = rng.random_range(0..remaining);
        let mut k = 0;
        for (i, b) in bs.iter().enumerate() {
            let left = b.samples.len() - cursor[i];
            if pick < left {
                k = i;
                break;
            }
            pick -= left;
        }
        let b = &bs[k];
        order.push(IndexEntry {
            sample: b.samples[cursor[k]],
            channels: b.channel_count,
            patches: b.n_patches,
        });
        cursor[k] += 1;
        remaining -= 1;
    }
    Ok(EpochPlan { order })
}

/// Fills one pending batch per bucket in plan order and emits it when full.
/// Incomplete batches at the end of the epoch are dropped.
pub fn make_batches(plan: &EpochPlan, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(invalid("batch_size must be >= 1"));
    }
    let mut sizes: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for e in &plan.order {
        *sizes.entry((e.channels, e.patches)).or_default() += 1;
    }
    if sizes.values().all(|&n| n < batch_size) {
        return Err(invalid(format!(
            "batch_size {batch_size} exceeds every bucket (largest has {})",
            sizes.values().max().copied().unwrap_or(0)
        )));
    }
    let mut pending: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut out = Vec::new();
    for e in &plan.order {
        let key = (e.channels, e.patches);
        let buf = pending.entry(key).or_default();
        buf.push(e.sample);
        if buf.len() == batch_size {
            out.push(Batch {
                id: out.len(),
                channel_count: e.channels,
                n_patches: e.patches,
                samples: std::mem::take(buf),
            });
        }
    }
    Ok(out)
}

/// Greedy longest-first assignment of batches to `n_workers` logical
/// workers so that their token totals are as even as possible. Returns the
/// batch ids per worker.
pub fn assign_workers(batches: &[Batch], n_workers: usize) -> Result<Vec<Vec<usize>>> {
    if n_workers == 0 {
        return Err(invalid("n_workers must be >= 1"));
    }
    let mut order: Vec<&Batch> = batches.iter().collect();
    order.sort_by(|a, b| b.tokens().cmp(&a.tokens()).then(a.id.cmp(&b.id)));
    let mut load = vec![0usize; n_workers];
    let mut out = vec![Vec::new(); n_workers];
    for b in order {
        let w = (0..n_workers).min_by_key(|&w| (load[w], w)).expect("n_workers >= 1");
        load[w] += b.tokens();
        out[w].push(b.id);
    }
    Ok(out)
}

/// `batch_id,channels,patches,samples` with sample ids separated by spaces.
pub fn plan_csv(batches: &[Batch]) -> String {
    let mut s = String::from("batch_id,channels,patches,samples\n");
    for b in batches {
        let ids: Vec<String> = b.samples.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "{},{},{},{}", b.id, b.channel_count, b.n_patches, ids.join(" "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn index(sizes: &[(usize, usize)]) -> Vec<IndexEntry> {
        let mut out = Vec::new();
        for &(c, n) in sizes {
            for _ in 0..n {
                out.push(IndexEntry {
                    sample: out.len(),
                    channels: c,
                    patches: 11,
                });
            }
        }
        out
    }

    #[test]
    fn two_equal_buckets() {
        let idx = index(&[(19, 100), (64, 100)]);
        let plan = bucket_shuffle(&idx, 3).unwrap();
        let batches = make_batches(&plan, 10).unwrap();
        assert_eq!(batches.len(), 20);
        for b in &batches {
            assert!(b.samples.iter().all(|&s| idx[s].channels == b.channel_count));
        }
        assert_eq!(plan, bucket_shuffle(&idx, 3).unwrap());
        assert_ne!(plan, bucket_shuffle(&idx, 4).unwrap());
    }

    #[test]
    fn ragged_tail_is_dropped() {
        let idx = index(&[(8, 220)]);
        let batches = make_batches(&bucket_shuffle(&idx, 0).unwrap(), 32).unwrap();
        assert_eq!(batches.len(), 6);
        assert_eq!(batches.iter().map(|b| b.samples.len()).sum::<usize>(), 192);
        let ones = make_batches(&bucket_shuffle(&idx, 0).unwrap(), 1).unwrap();
        assert_eq!(ones.len(), 220);
        assert!(make_batches(&bucket_shuffle(&idx, 0).unwrap(), 221).is_err());
        assert!(bucket_shuffle(&[], 0).is_err());
    }

    #[test]
    fn single_bucket_is_a_uniform_permutation() {
        // Position of sample 0 over many seeds should be close to uniform.
        let idx = index(&[(4, 10)]);
        let mut counts = [0usize; 10];
        for s in 0..5000 {
            let plan = bucket_shuffle(&idx, s).unwrap();
            counts[plan.order.iter().position(|e| e.sample == 0).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 - 500.0).abs() < 4.0 * (500.0f64 * 0.9).sqrt(), "{counts:?}");
        }
    }

    #[test]
    fn workers_are_balanced_by_tokens() {
        let idx = index(&[(4, 40), (16, 40), (64, 40)]);
        let batches = make_batches(&bucket_shuffle(&idx, 1).unwrap(), 4).unwrap();
        let assign = assign_workers(&batches, 3).unwrap();
        let loads: Vec<usize> = assign
            .iter()
            .map(|ids| ids.iter().map(|&i| batches[i].tokens()).sum())
            .collect();
        let max = *loads.iter().max().unwrap();
        let min = *loads.iter().min().unwrap();
        let biggest = batches.iter().map(Batch::tokens).max().unwrap();
        assert!(max - min <= biggest, "{loads:?}");
        let mut all: Vec<usize> = assign.concat();
        all.sort();
        assert_eq!(all, (0..batches.len()).collect::<Vec<_>>());
    }

    #[test]
    fn csv_dump() {
        let idx = index(&[(4, 4)]);
        let batches = make_batches(&bucket_shuffle(&idx, 1).unwrap(), 2).unwrap();
        let csv = plan_csv(&batches);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,4,11,"));
    }

    proptest! {
        #[test]
        fn every_sample_once_minus_tail(sizes in prop::collection::vec((1usize..6, 1usize..40), 1..5), bs in 1usize..8, seed in any::<u64>()) {
            let sizes: Vec<(usize, usize)> = sizes.into_iter().enumerate().map(|(i, (_, n))| (i + 1, n)).collect();
            let idx = index(&sizes);
            let plan = bucket_shuffle(&idx, seed).unwrap();
            let mut seen: Vec<usize> = plan.order.iter().map(|e| e.sample).collect();
            seen.sort();
            prop_assert_eq!(seen, (0..idx.len()).collect::<Vec<_>>());
            if let Ok(batches) = make_batches(&plan, bs) {
                let emitted: usize = batches.iter().map(|b| b.samples.len()).sum();
                let expected: usize = sizes.iter().map(|&(_, n)| n / bs * bs).sum();
                prop_assert_eq!(emitted, expected);
                let mut ids: Vec<usize> = batches.iter().flat_map(|b| b.samples.clone()).collect();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), emitted);
            }
        }
    }
}
