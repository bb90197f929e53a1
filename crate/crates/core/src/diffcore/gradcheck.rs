//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub h: f64,
    /// Coordinates sampled per tensor; tensors smaller than this are checked fully.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            samples_per_param: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
}

/// Compares analytic gradients of a scalar loss against central differences.
///
/// `loss_fn` must record a deterministic scalar loss onto the fresh tape it is
/// given (fixed seeds, eval-mode normalization, no dropout). The relative error
/// of one coordinate is `|analytic − numeric| / max(1, |analytic|, |numeric|)`;
/// the report carries the maximum over all sampled coordinates.
pub fn finite_difference_check<F>(store: &mut ParamStore, mut loss_fn: F, opts: FdOptions) -> Result<FdReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    if opts.h <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    tape.backward(loss, store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
    };
    let ids: Vec<_> = store.trainable().collect();
    for id in ids {
        let n = store.get(id).numel();
        let analytic: Vec<f64> = store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + opts.h;
            let plus = eval_loss(store, &mut loss_fn)?;
            store.get_mut(id).data_mut()[k] = orig - opts.h;
            let minus = eval_loss(store, &mut loss_fn)?;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[k];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = store.name(id).to_owned();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}

fn eval_loss<F>(store: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::contract("loss must be scalar"));
    }
    Ok(v.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut store = ParamStore::new();
        let id = store
            .add_param("w", Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]))
            .unwrap();
        let rep = finite_difference_check(
            &mut store,
            |s, t| {
                let w = t.param(s, id);
                let sq = t.mul(w, w)?;
                Ok(t.sum(sq))
            },
            FdOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
        assert_eq!(rep.coordinates_checked, 4);
    }

    #[test]
    fn constant_function() {
        let mut store = ParamStore::new();
        let id = store.add_param("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let rep = finite_difference_check(
            &mut store,
            |s, t| {
                let w = t.param(s, id);
                let z = t.scale(w, 0.0);
                let c = t.constant(Tensor::scalar(4.0));
                let total = t.sum(z);
                t.add(total, c)
            },
            FdOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let mut store = ParamStore::new();
        let id = store.add_param("w", Tensor::scalar(1.0)).unwrap();
        let res = finite_difference_check(
            &mut store,
            |s, t| Ok(t.param(s, id)),
            FdOptions {
                h: 0.0,
                ..FdOptions::default()
            },
        );
        assert!(res.is_err());
    }
}
