//! Stratified cross-validation splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::derive_seed;
use crate::error::{Error, Result};

fn class_members(labels: &[u8]) -> [Vec<usize>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        out[usize::from(l.min(1))].push(i);
    }
    out
}

/// Test-fold id of every sample. Each class is shuffled with its own seeded
/// stream and dealt round-robin over the folds; the second class continues
/// the deal where the first stopped, which keeps fold sizes within one.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {k}")));
    }
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for (c, mut members) in class_members(labels).into_iter().enumerate() {
        if members.len() < k {
            return Err(Error::config(format!(
                "class {c} has {} samples, fewer than {k} folds",
                members.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("kfold/class{c}")));
        members.shuffle(&mut rng);
        for i in members {
            fold[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(fold)
}

/// Splits `pool` into (train, validation), stratified by label, putting
/// `round(train_fraction·n_c)` of each class in train while leaving at least
/// one sample of each class on both sides when the class has two or more.
pub fn train_val_split(pool: &[usize], labels: &[u8], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..2u8 {
        let mut members: Vec<usize> = pool.iter().copied().filter(|&i| labels[i].min(1) == c).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("trainval/class{c}")));
        members.shuffle(&mut rng);
        let n = members.len();
        let mut n_train = (train_fraction * n as f64).round() as usize;
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        }
        train.extend_from_slice(&members[..n_train.min(n)]);
        val.extend_from_slice(&members[n_train.min(n)..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}
