use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam hyperparameters and per-parameter moment buffers.
///
/// Moments are indexed like the owning [`ParamStore`]; buffers (non-trainable
/// entries) keep empty moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(skip)]
    pub(crate) m: Vec<Vec<f64>>,
    #[serde(skip)]
    pub(crate) v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure_shapes(&mut self, store: &ParamStore) {
        if self.m.len() == store.len() {
            return;
        }
        self.m = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                if t.requires_grad() {
                    vec![0.0; t.numel()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        self.v = self.m.clone();
    }

    pub fn first_moment(&self, index: usize) -> Option<&[f64]> {
        self.m.get(index).map(Vec::as_slice)
    }

    pub fn second_moment(&self, index: usize) -> Option<&[f64]> {
        self.v.get(index).map(Vec::as_slice)
    }

    pub(crate) fn set_moments(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.m = m;
        self.v = v;
    }
}

/// One bias-corrected Adam update of every trainable tensor, using the
/// gradients accumulated in `store`. Tensors without a gradient buffer are
/// treated as having a zero gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    state.ensure_shapes(store);
    for id in store.trainable().collect::<Vec<_>>() {
        if let Some(g) = store.get(id).grad() {
            if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in `{}` at flat index {pos}",
                    store.name(id)
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for id in store.trainable().collect::<Vec<_>>() {
        let i = id.index();
        let tensor = store.get_mut(id);
        let grad = tensor.grad().map(<[f64]>::to_vec);
        let Some(grad) = grad else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[k];
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
