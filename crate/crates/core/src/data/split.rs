//! Seeded subject- and patch-level splits.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Sorted, disjoint index sets covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

fn holdout_count(n: usize, frac: f64) -> usize {
    ((n as f64 * frac).round() as usize).clamp(1, n - 1)
}

fn permuted_split(n: usize, held: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let mut a = idx[..held].to_vec();
    let mut b = idx[held..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Holds out 20% of subjects (8 of 40); returns `(heldout, trainval)` in
/// input order.
pub fn split_subjects(ids: &[String], seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 subjects to split, got {}",
            ids.len()
        )));
    }
    let (held, rest) = permuted_split(ids.len(), holdout_count(ids.len(), 0.2), seed);
    let pick = |v: Vec<usize>| v.into_iter().map(|i| ids[i].clone()).collect();
    Ok((pick(held), pick(rest)))
}

/// Random 80/20 split of `n` patches, by patch rather than by subject.
pub fn split_patches(n: usize, seed: u64) -> Result<PatchSplit> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 patches to split, got {n}"
        )));
    }
    let (val, train) = permuted_split(n, holdout_count(n, 0.2), seed);
    Ok(PatchSplit { train, val })
}
