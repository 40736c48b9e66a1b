//! Seeded train/test splits and k-fold partitions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.75,
            folds: 5,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("folds must be >= 2, got {}", self.folds)));
        }
        Ok(())
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Shuffles `0..n` and sends the first `ceil(train_fraction * n)` to the
/// training side, keeping at least one index on each side.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples to split, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must lie in (0,1), got {train_fraction}"
        )));
    }
    let n_train = ((train_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let mut idx = shuffled(n, seed);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

pub fn split<S: Clone>(items: &[S], spec: &SplitSpec) -> Result<(Vec<S>, Vec<S>)> {
    let (tr, te) = split_indices(items.len(), spec.train_fraction, spec.seed)?;
    Ok((
        tr.into_iter().map(|i| items[i].clone()).collect(),
        te.into_iter().map(|i| items[i].clone()).collect(),
    ))
}

/// `(train, validation)` index sets for each fold. Fold sizes differ by at
/// most one; the first `n % folds` folds take the extra element.
pub fn kfold_indices(n: usize, folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("folds must be >= 2, got {folds}")));
    }
    if n < folds {
        return Err(Error::InvalidArgument(format!("{n} samples cannot fill {folds} folds")));
    }
    let idx = shuffled(n, seed);
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        let val = idx[start..start + size].to_vec();
        let train = idx[..start].iter().chain(&idx[start + size..]).copied().collect();
        out.push((train, val));
        start += size;
    }
    Ok(out)
}

pub fn kfold<S: Clone>(items: &[S], folds: usize, seed: u64) -> Result<Vec<(Vec<S>, Vec<S>)>> {
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect::<Vec<S>>();
    Ok(kfold_indices(items.len(), folds, seed)?
        .iter()
        .map(|(tr, va)| (pick(tr), pick(va)))
        .collect())
}
