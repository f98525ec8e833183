//! Seeded train/val/test splits and k-fold partitions of case identifiers.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub holdout: Vec<String>,
}

fn shuffled(case_ids: &[String], seed: u64) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    for id in case_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate case id {id:?}")));
        }
    }
    let mut ids = case_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ids)
}

/// Shuffles by `seed`, then takes `round(n * val)` and `round(n * test)` cases;
/// the remainder is train.
pub fn split_dataset(case_ids: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    if case_ids.is_empty() {
        return Err(Error::InvalidArgument("no cases to split".into()));
    }
    let ids = shuffled(case_ids, seed)?;
    let n = ids.len();
    let n_val = ((n as f64 * va).round() as usize).min(n);
    let n_test = ((n as f64 * te).round() as usize).min(n - n_val);
    let n_train = n - n_val - n_test;
    Ok(DatasetSplit {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
        seed,
    })
}

/// `k` contiguous holdout chunks of a seeded shuffle; the first `n % k` folds
/// hold one extra case.
pub fn kfold(case_ids: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k = {k} must be >= 2")));
    }
    if case_ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} cases cannot fill {k} folds",
            case_ids.len()
        )));
    }
    let ids = shuffled(case_ids, seed)?;
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let holdout = ids[start..start + len].to_vec();
        let train = ids[..start].iter().chain(&ids[start + len..]).cloned().collect();
        folds.push(Fold { train, holdout });
        start += len;
    }
    Ok(folds)
}
