//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

/// `v` is among the `k` nearest of `u` iff fewer than `k` other nodes beat it
/// under the (squared distance, index) order.
pub fn knn_oracle(coords: &[[f64; 2]], k: usize) -> BTreeSet<[usize; 2]> {
    let n = coords.len();
    let d2 = |a: usize, b: usize| (coords[a][0] - coords[b][0]).powi(2) + (coords[a][1] - coords[b][1]).powi(2);
    let mut out = BTreeSet::new();
    for u in 0..n {
        for v in (0..n).filter(|&v| v != u) {
            let beaten_by = (0..n)
                .filter(|&w| w != u && w != v)
                .filter(|&w| d2(u, w) < d2(u, v) || (d2(u, w) == d2(u, v) && w < v))
                .count();
            if beaten_by < k {
                out.insert([u, v]);
                out.insert([v, u]);
            }
        }
    }
    out
}

pub fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..scores.len()).filter(|&i| labels[i] == 1) {
        for j in (0..scores.len()).filter(|&j| labels[j] == 0) {
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Precision at each positive's rank, in rank order, averaged over positives.
pub fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let above = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut hits: Vec<(usize, f64)> = (0..scores.len())
        .filter(|&i| labels[i] == 1)
        .map(|i| {
            let rank = (0..scores.len()).filter(|&j| above(i, j)).count() + 1;
            let tp = (0..scores.len()).filter(|&j| labels[j] == 1 && above(i, j)).count() + 1;
            (rank, tp as f64 / rank as f64)
        })
        .collect();
    hits.sort_by_key(|h| h.0);
    let total: f64 = hits.iter().map(|h| h.1).sum();
    total / hits.len() as f64
}
