use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::CsiDataset;
use crate::error::{invalid, Result};

/// How the split grouped samples before allocating them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StratifyMode {
    /// By the tuple of labels over every task.
    JointLabels,
    /// By the first task's label only.
    FirstTask,
    /// No grouping.
    None,
}

/// Picks the finest stratification in which every group has at least two
/// samples.
pub fn stratify_mode(ds: &CsiDataset) -> StratifyMode {
    if groups(ds, StratifyMode::JointLabels).values().all(|g| g.len() >= 2) {
        StratifyMode::JointLabels
    } else if groups(ds, StratifyMode::FirstTask).values().all(|g| g.len() >= 2) {
        StratifyMode::FirstTask
    } else {
        StratifyMode::None
    }
}

fn groups(ds: &CsiDataset, mode: StratifyMode) -> BTreeMap<Vec<usize>, Vec<usize>> {
    let mut out: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let key = match mode {
            StratifyMode::JointLabels => ds
                .meta
                .tasks
                .iter()
                .map(|t| s.labels.get(&t.name).copied().unwrap_or(usize::MAX))
                .collect(),
            StratifyMode::FirstTask => vec![s.labels[&ds.meta.tasks[0].name]],
            StratifyMode::None => Vec::new(),
        };
        out.entry(key).or_default().push(i);
    }
    out
}

/// Splits into `(train, test)` with `round(train_ratio · N)` training samples.
///
/// Sample order inside each part follows the input order. Deterministic in
/// `seed`.
pub fn split_dataset(
    ds: &CsiDataset,
    train_ratio: f64,
    seed: u64,
) -> Result<(CsiDataset, CsiDataset)> {
    let (train, test, _) = split_indices(ds, train_ratio, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

pub(crate) fn split_indices(
    ds: &CsiDataset,
    train_ratio: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, StratifyMode)> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(invalid(format!("train ratio must lie in (0, 1), got {train_ratio}")));
    }
    if ds.is_empty() {
        return Err(invalid("cannot split an empty dataset"));
    }
    let n = ds.len();
    let n_train = (train_ratio * n as f64).round() as usize;
    let mode = stratify_mode(ds);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut strata: Vec<Vec<usize>> = groups(ds, mode).into_values().collect();
    for s in &mut strata {
        s.shuffle(&mut rng);
    }

    // Largest-remainder allocation so the quotas sum exactly to n_train.
    let exact: Vec<f64> = strata.iter().map(|s| s.len() as f64 * train_ratio).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut short = n_train - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..strata.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if short == 0 {
            break;
        }
        if quota[k] < strata[k].len() {
            quota[k] += 1;
            short -= 1;
        }
    }

    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    for (s, q) in strata.iter().zip(&quota) {
        train.extend_from_slice(&s[..*q]);
        test.extend_from_slice(&s[*q..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test, mode))
}
