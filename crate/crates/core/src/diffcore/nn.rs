//! Layer building blocks recorded onto a [`Tape`]: affine maps, MLPs,
//! batch normalization and inverted dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{xavier_uniform, ParamId, ParamStore};
use super::tape::{BnMode, BnStats, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-pass state: mode, dropout randomness and pending running-stat updates.
pub struct Ctx<'a> {
    pub mode: Mode,
    rng: Option<&'a mut ChaCha8Rng>,
    bn_updates: Vec<(BatchNorm, BnStats)>,
    /// When false, dropout is skipped even in train mode.
    pub dropout_enabled: bool,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            rng: None,
            bn_updates: Vec::new(),
            dropout_enabled: false,
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            mode: Mode::Train,
            rng: Some(rng),
            bn_updates: Vec::new(),
            dropout_enabled: true,
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Folds the batch statistics gathered during the pass into the
    /// running averages stored in `store`.
    pub fn apply_bn_updates(&mut self, store: &mut ParamStore) {
        for (bn, stats) in self.bn_updates.drain(..) {
            bn.update_running(store, &stats);
        }
    }
}

/// `y = x·W + b` with `W: in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add_param(&format!("{prefix}.w"), xavier_uniform(d_in, d_out, rng))?;
        let b = if bias {
            Some(store.add_param(&format!("{prefix}.b"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stack of affine layers with ReLU between them (none after the last).
/// Parameters are named `{prefix}.w{i}` / `{prefix}.b{i}`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config("an MLP needs at least input and output widths"));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let w = store.add_param(&format!("{prefix}.w{i}"), xavier_uniform(pair[0], pair[1], rng))?;
            let b = store.add_param(&format!("{prefix}.b{i}"), Tensor::zeros(&[pair[1]]))?;
            layers.push(Linear {
                w,
                b: Some(b),
                d_in: pair[0],
                d_out: pair[1],
            });
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        mlp_forward(tape, store, x, &self.layers)
    }
}

/// Affine → ReLU for every hidden layer, affine only for the last.
pub fn mlp_forward(tape: &mut Tape, store: &ParamStore, x: Var, layers: &[Linear]) -> Result<Var> {
    for pair in layers.windows(2) {
        if pair[0].d_out != pair[1].d_in {
            return Err(Error::dim(format!(
                "MLP layer widths do not chain: {} then {}",
                pair[0].d_out, pair[1].d_in
            )));
        }
    }
    if let Some(first) = layers.first() {
        if tape.value(x).cols() != first.d_in {
            return Err(Error::dim(format!(
                "MLP input width {} but first layer expects {}",
                tape.value(x).cols(),
                first.d_in
            )));
        }
    }
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(tape, store, h)?;
        if i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Batch normalization with running statistics kept as store buffers.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(&format!("{prefix}.gamma"), Tensor::full(&[d], 1.0))?,
            beta: store.add_param(&format!("{prefix}.beta"), Tensor::zeros(&[d]))?,
            running_mean: store.add_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[d]))?,
            running_var: store.add_buffer(&format!("{prefix}.running_var"), Tensor::full(&[d], 1.0))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let mode = match ctx.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: store.get(self.running_mean).data(),
                var: store.get(self.running_var).data(),
            },
        };
        let (y, stats) = tape.batchnorm(x, gamma, beta, mode, BN_EPS)?;
        if let Some(stats) = stats {
            ctx.bn_updates.push((*self, stats));
        }
        Ok(y)
    }

    fn update_running(&self, store: &mut ParamStore, stats: &BnStats) {
        let m = BN_MOMENTUM;
        for (r, s) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s;
        }
    }
}

/// Inverted dropout: in train mode zero each entry with probability `rate`
/// and scale survivors by `1/(1-rate)`; identity otherwise.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, ctx: &mut Ctx<'_>) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if ctx.mode == Mode::Eval || !ctx.dropout_enabled || rate == 0.0 {
        return Ok(x);
    }
    let rng = ctx
        .rng
        .as_deref_mut()
        .ok_or_else(|| Error::contract("train-mode dropout needs an RNG"))?;
    let keep = 1.0 - rate;
    let mask = (0..tape.value(x).numel())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mask_mul(x, mask)
}
