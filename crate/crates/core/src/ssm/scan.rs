//! Linear recurrences `h_t = a_t ⊙ h_{t-1} + b_t` over a time axis, for many
//! independent lanes at once.
//!
//! Buffers are row-major `steps × lanes`. The parallel variant treats each
//! step as the affine map `h ↦ a·h + b`; composing maps is associative, so a
//! Blelloch up-sweep/down-sweep yields every prefix in `O(log T)` levels
//! with `O(T)` total combines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Lane-steps above which a sweep level is split across threads.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    Sequential,
    #[default]
    Parallel,
}

/// Applies `first` then `second`: `(a2·a1, a2·b1 + b2)`.
#[inline]
pub fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// Reference left-to-right recurrence from a zero initial state.
pub fn sequential_scan_lanes(a: &[f64], b: &[f64], lanes: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    let mut h = vec![0.0; b.len()];
    if lanes == 0 {
        return h;
    }
    let steps = b.len() / lanes;
    for t in 0..steps {
        let row = t * lanes..(t + 1) * lanes;
        if t == 0 {
            h[row.clone()].copy_from_slice(&b[row]);
            continue;
        }
        let (prev, cur) = h.split_at_mut(t * lanes);
        let prev = &prev[(t - 1) * lanes..];
        for l in 0..lanes {
            cur[l] = a[t * lanes + l] * prev[l] + b[t * lanes + l];
        }
    }
    h
}

/// Work-efficient (Blelloch) scan producing the same states as
/// [`sequential_scan_lanes`] up to floating-point reassociation.
pub fn parallel_scan_lanes(a: &[f64], b: &[f64], lanes: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    if lanes == 0 || b.is_empty() {
        return vec![0.0; b.len()];
    }
    let steps = b.len() / lanes;
    let padded = steps.next_power_of_two();
    // identity map (1, 0) in the padding
    let mut pa = vec![1.0; padded * lanes];
    let mut pb = vec![0.0; padded * lanes];
    pa[..a.len()].copy_from_slice(a);
    pb[..b.len()].copy_from_slice(b);
    let parallel = padded * lanes >= PAR_THRESHOLD;

    // Up-sweep: the right element of each block absorbs its left sibling.
    let mut half = 1;
    while half < padded {
        let block = 2 * half * lanes;
        let sweep = |(ca, cb): (&mut [f64], &mut [f64])| {
            let left = (half - 1) * lanes;
            let right = (2 * half - 1) * lanes;
            for l in 0..lanes {
                let (na, nb) = combine((ca[left + l], cb[left + l]), (ca[right + l], cb[right + l]));
                ca[right + l] = na;
                cb[right + l] = nb;
            }
        };
        if parallel {
            pa.par_chunks_mut(block).zip(pb.par_chunks_mut(block)).for_each(sweep);
        } else {
            pa.chunks_mut(block).zip(pb.chunks_mut(block)).for_each(sweep);
        }
        half *= 2;
    }

    // Down-sweep to exclusive prefixes.
    let root = (padded - 1) * lanes;
    pa[root..].fill(1.0);
    pb[root..].fill(0.0);
    let mut half = padded / 2;
    while half >= 1 {
        let block = 2 * half * lanes;
        let sweep = |(ca, cb): (&mut [f64], &mut [f64])| {
            let left = (half - 1) * lanes;
            let right = (2 * half - 1) * lanes;
            for l in 0..lanes {
                let prefix = (ca[right + l], cb[right + l]);
                let left_sum = (ca[left + l], cb[left + l]);
                ca[left + l] = prefix.0;
                cb[left + l] = prefix.1;
                let (na, nb) = combine(prefix, left_sum);
                ca[right + l] = na;
                cb[right + l] = nb;
            }
        };
        if parallel {
            pa.par_chunks_mut(block).zip(pb.par_chunks_mut(block)).for_each(sweep);
        } else {
            pa.chunks_mut(block).zip(pb.chunks_mut(block)).for_each(sweep);
        }
        half /= 2;
    }

    // Inclusive state: apply step t to the exclusive prefix state.
    let mut h = vec![0.0; b.len()];
    for i in 0..b.len() {
        h[i] = a[i] * pb[i] + b[i];
    }
    h
}

pub fn scan_lanes(kind: ScanKind, a: &[f64], b: &[f64], lanes: usize) -> Vec<f64> {
    match kind {
        ScanKind::Sequential => sequential_scan_lanes(a, b, lanes),
        ScanKind::Parallel => parallel_scan_lanes(a, b, lanes),
    }
}

fn check_scan_shapes(a_bar: &Tensor, bx: &Tensor) -> Result<usize> {
    if a_bar.shape() != bx.shape() {
        return Err(Error::dim(format!(
            "scan operands {:?} and {:?} differ",
            a_bar.shape(),
            bx.shape()
        )));
    }
    if a_bar.shape().is_empty() {
        return Err(Error::dim("scan needs a leading time axis"));
    }
    Ok(a_bar.shape()[1..].iter().product())
}

/// Sequential recurrence over the leading axis of `T × d × S` tensors, from
/// `h_0 = 0`.
pub fn sequential_scan(a_bar: &Tensor, bx: &Tensor) -> Result<Tensor> {
    let lanes = check_scan_shapes(a_bar, bx)?;
    Tensor::new(bx.shape().to_vec(), sequential_scan_lanes(a_bar.data(), bx.data(), lanes))
}

/// Blelloch-scan counterpart of [`sequential_scan`].
pub fn parallel_scan(a_bar: &Tensor, bx: &Tensor) -> Result<Tensor> {
    let lanes = check_scan_shapes(a_bar, bx)?;
    Tensor::new(bx.shape().to_vec(), parallel_scan_lanes(a_bar.data(), bx.data(), lanes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memoryless_when_decay_is_zero() {
        let b = vec![1.0, -2.0, 3.0, 0.5];
        let a = vec![0.0; 4];
        assert_eq!(sequential_scan_lanes(&a, &b, 1), b);
        assert_eq!(parallel_scan_lanes(&a, &b, 1), b);
    }

    #[test]
    fn scalar_chain() {
        let h = sequential_scan_lanes(&[0.5, 0.5], &[1.0, 1.0], 1);
        assert_eq!(h, vec![1.0, 1.5]);
        let h = parallel_scan_lanes(&[0.5, 0.5], &[1.0, 1.0], 1);
        assert_eq!(h, vec![1.0, 1.5]);
    }

    #[test]
    fn zero_input_stays_zero() {
        let a = vec![0.9; 12];
        let b = vec![0.0; 12];
        assert!(parallel_scan_lanes(&a, &b, 3).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_step_equals_input() {
        let a = Tensor::new(vec![1, 2, 2], vec![0.3, 0.1, 0.7, 0.9]).unwrap();
        let b = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(parallel_scan(&a, &b).unwrap().data(), b.data());
    }

    #[test]
    fn tensor_shapes_must_agree() {
        let a = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(sequential_scan(&a, &b).is_err());
    }

    #[test]
    fn large_input_takes_threaded_path() {
        let steps = 1000;
        let lanes = 64;
        let a: Vec<f64> = (0..steps * lanes).map(|i| 0.5 + 0.4 * ((i as f64) * 0.37).sin()).collect();
        let b: Vec<f64> = (0..steps * lanes).map(|i| ((i as f64) * 0.11).cos()).collect();
        let s = sequential_scan_lanes(&a, &b, lanes);
        let p = parallel_scan_lanes(&a, &b, lanes);
        let diff = s.iter().zip(&p).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }
}
