//! Dynamically recorded operation tape with reverse-mode gradient accumulation.
//!
//! A forward pass appends nodes to a [`Tape`]; each node owns its value and
//! remembers which op produced it. [`Tape::backward`] walks the nodes in
//! reverse insertion order (which is a valid reverse topological order,
//! since inputs always precede outputs) and pushes adjoints to the inputs.
//! Parameters enter the tape as copies of [`ParamStore`] entries; their
//! adjoints are added to the store's gradient buffers at the end.
//!
//! Fused kernels that live outside this module (the selective scan, the
//! fusion mixer) plug in through [`CustomOp`].

use std::fmt;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Contiguous row ranges, one per graph in a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        let mut acc = 0;
        for &l in lengths {
            acc += l;
            offsets.push(acc);
        }
        Self { offsets }
    }

    pub fn single(n: usize) -> Self {
        Self::from_lengths(&[n])
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn len_of(&self, g: usize) -> usize {
        self.offsets[g + 1] - self.offsets[g]
    }

    pub fn iter(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }
}

/// A differentiable operation defined outside the tape.
///
/// `backward` receives the input values, this node's output value and the
/// adjoint of the output, and returns one adjoint per input (`None` when the
/// input receives no gradient).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softplus(Var),
    MaskMul(Var, Vec<f64>),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentMean(Var, Segments),
    Sum(Var),
    SoftmaxRows(Var),
    BatchNorm(Box<BnCache>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulScalar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::MaskMul(..) => "mask_mul",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::SegmentMean(..) => "segment_mean",
            Op::Sum(_) => "sum",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::BatchNorm(_) => "batchnorm",
            Op::Custom(_, op) => op.name(),
        };
        f.write_str(name)
    }
}

struct BnCache {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

/// Batch statistics produced by a train-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when the batch has a single row).
    pub var: Vec<f64>,
}

/// Normalization source for [`Tape::batchnorm`].
pub enum BnMode<'a> {
    /// Standardize with the batch's own mean and (biased) variance.
    Train,
    /// Standardize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation recorder for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf)
    }

    /// Copy of `v`'s value cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).detached();
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id).detached();
        self.push(t, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::dim(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k) = dims2(av);
        let (k2, n) = dims2(bv);
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), bv.data(), &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::Matmul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a length-`d` vector to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = dims2(self.value(x));
        if self.value(bias).numel() != d {
            return Err(Error::dim(format!(
                "bias of {} values for rows of width {d}",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..n {
            for (o, bb) in data[r * d..(r + 1) * d].iter_mut().zip(b) {
                *o += bb;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(x, bias)))
    }

    /// `s · x` where `s` is a one-element tensor on the tape.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("mul_scalar expects a one-element scale"));
        }
        let sv = self.value(s).data()[0];
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::MulScalar(x, s)))
    }

    /// `c · x` for a fixed constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| softplus(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Softplus(x))
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::dim("mask length does not match input"));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::MaskMul(x, mask)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = dims2(self.value(a));
        let (n2, q) = dims2(self.value(b));
        if n != n2 {
            return Err(Error::dim(format!("concat_cols row counts {n} and {n2}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            data.extend_from_slice(&av[r * p..(r + 1) * p]);
            data.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        let t = Tensor::new(vec![n, p + q], data)?;
        Ok(self.push(t, Op::ConcatCols(a, b)))
    }

    /// `out[r] = x[idx[r]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (n, d) = dims2(self.value(x));
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            if i >= n {
                return Err(Error::dim(format!("gather index {i} out of {n} rows")));
            }
            data.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(t, Op::GatherRows(x, idx)))
    }

    /// `out[idx[e]] += x[e]` into an `n×d` result; rows are summed in `e` order.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Vec<usize>, n: usize) -> Result<Var> {
        let (e, d) = dims2(self.value(x));
        if idx.len() != e {
            return Err(Error::dim(format!("{} scatter targets for {e} rows", idx.len())));
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; n * d];
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::dim(format!("scatter index {i} out of {n} rows")));
            }
            for (o, v) in data[i * d..(i + 1) * d].iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        let t = Tensor::new(vec![n, d], data)?;
        Ok(self.push(t, Op::ScatterAddRows(x, idx)))
    }

    /// Per-segment row mean: `N×d` → `B×d`.
    pub fn segment_mean(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let (n, d) = dims2(self.value(x));
        if segs.total() != n {
            return Err(Error::dim(format!(
                "segments cover {} rows, tensor has {n}",
                segs.total()
            )));
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; segs.count() * d];
        for (g, r) in segs.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::dim(format!("segment {g} is empty")));
            }
            let len = r.len() as f64;
            let out = &mut data[g * d..(g + 1) * d];
            for row in r {
                for (o, v) in out.iter_mut().zip(&xv[row * d..(row + 1) * d]) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= len;
            }
        }
        let t = Tensor::new(vec![segs.count(), d], data)?;
        Ok(self.push(t, Op::SegmentMean(x, segs.clone())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Softmax over the last axis, with max-subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = super::tensor::softmax(self.value(x))?;
        Ok(self.push(t, Op::SoftmaxRows(x)))
    }

    /// Per-column batch normalization of an `n×d` input followed by the
    /// learned affine map. In train mode the batch statistics are returned so
    /// the caller can update running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BnStats>)> {
        let (n, d) = dims2(self.value(x));
        if self.value(x).shape().len() != 2 {
            return Err(Error::dim("batchnorm expects an n×d input"));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim(format!("batchnorm affine params must have {d} values")));
        }
        let xv = self.value(x).data();
        let (mean, var, stats, train) = match mode {
            BnMode::Train => {
                if n == 0 {
                    return Err(Error::dim("batchnorm over zero rows"));
                }
                let mut mean = vec![0.0; d];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        let dv = xv[r * d + c] - mean[c];
                        var[c] += dv * dv;
                    }
                }
                let biased: Vec<f64> = var.iter().map(|v| v / n as f64).collect();
                let unbiased = if n > 1 {
                    var.iter().map(|v| v / (n - 1) as f64).collect()
                } else {
                    biased.clone()
                };
                let stats = BnStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, biased, Some(stats), true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(Error::dim("running statistics width mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                let i = r * d + c;
                xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let cache = BnCache {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        Ok((self.push(t, Op::BatchNorm(Box::new(cache))), stats))
    }

    /// Records a node computed by an external kernel.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(value, Op::Custom(inputs, op))
    }

    /// Propagates `∂loss/∂·` back through the tape and adds parameter
    /// adjoints into `store`. Calling it twice accumulates.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                if !store.get(*id).requires_grad() {
                    continue;
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for `{}`",
                        store.name(*id)
                    )));
                }
                store.get_mut(*id).accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    /// Adjoint of every node with respect to a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss).data()[0].is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Matmul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = dims2(av);
                let n = bv.cols();
                // dA = G·Bᵀ, dB = Aᵀ·G
                gemm_nt(m, n, k, g, bv.data(), slot(grads, *a, m * k), 1.0);
                gemm_tn(k, m, n, av.data(), g, slot(grads, *b, k * n), 1.0);
            }
            Op::Add(a, b) => {
                axpy(slot(grads, *a, g.len()), 1.0, g);
                axpy(slot(grads, *b, g.len()), 1.0, g);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da = slot(grads, *a, g.len());
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
                let db = slot(grads, *b, g.len());
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
            Op::AddRow(x, b) => {
                axpy(slot(grads, *x, g.len()), 1.0, g);
                let d = self.value(*b).numel();
                let db = slot(grads, *b, d);
                for row in g.chunks(d) {
                    axpy(db, 1.0, row);
                }
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).data()[0];
                axpy(slot(grads, *x, g.len()), sv, g);
                let xv = self.value(*x).data();
                let ds: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                slot(grads, *s, 1)[0] += ds;
            }
            Op::Scale(x, c) => axpy(slot(grads, *x, g.len()), *c, g),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = slot(grads, *x, g.len());
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let dx = slot(grads, *x, g.len());
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                    *d += gi * sigmoid(*xi);
                }
            }
            Op::MaskMul(x, mask) => {
                let dx = slot(grads, *x, g.len());
                for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                let n = out.rows();
                {
                    let da = slot(grads, *a, n * p);
                    for r in 0..n {
                        axpy(&mut da[r * p..(r + 1) * p], 1.0, &g[r * (p + q)..r * (p + q) + p]);
                    }
                }
                let db = slot(grads, *b, n * q);
                for r in 0..n {
                    axpy(
                        &mut db[r * q..(r + 1) * q],
                        1.0,
                        &g[r * (p + q) + p..(r + 1) * (p + q)],
                    );
                }
            }
            Op::GatherRows(x, idx_map) => {
                let d = out.cols();
                let n = self.value(*x).rows();
                let dx = slot(grads, *x, n * d);
                for (r, &i) in idx_map.iter().enumerate() {
                    axpy(&mut dx[i * d..(i + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                }
            }
            Op::ScatterAddRows(x, idx_map) => {
                let d = out.cols();
                let dx = slot(grads, *x, idx_map.len() * d);
                for (r, &i) in idx_map.iter().enumerate() {
                    axpy(&mut dx[r * d..(r + 1) * d], 1.0, &g[i * d..(i + 1) * d]);
                }
            }
            Op::SegmentMean(x, segs) => {
                let d = out.cols();
                let dx = slot(grads, *x, segs.total() * d);
                for (gi, r) in segs.iter().enumerate() {
                    let w = 1.0 / r.len() as f64;
                    let go = &g[gi * d..(gi + 1) * d];
                    for row in r {
                        axpy(&mut dx[row * d..(row + 1) * d], w, go);
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let dx = slot(grads, *x, n);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::SoftmaxRows(x) => {
                let c = out.shape().last().copied().unwrap_or(1);
                let p = out.data();
                let dx = slot(grads, *x, p.len());
                for ((dxr, pr), gr) in dx.chunks_mut(c).zip(p.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, pi), gi) in dxr.iter_mut().zip(pr).zip(gr) {
                        *d += pi * (gi - dot);
                    }
                }
            }
            Op::BatchNorm(cache) => {
                let (n, d) = dims2(out);
                let gamma = self.value(cache.gamma).data().to_vec();
                {
                    let dgamma = slot(grads, cache.gamma, d);
                    for r in 0..n {
                        for c in 0..d {
                            dgamma[c] += g[r * d + c] * cache.xhat[r * d + c];
                        }
                    }
                }
                {
                    let dbeta = slot(grads, cache.beta, d);
                    for row in g.chunks(d) {
                        axpy(dbeta, 1.0, row);
                    }
                }
                let dx = slot(grads, cache.x, n * d);
                if cache.train {
                    let nf = n as f64;
                    for c in 0..d {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for r in 0..n {
                            let gh = g[r * d + c] * gamma[c];
                            sum_g += gh;
                            sum_gx += gh * cache.xhat[r * d + c];
                        }
                        for r in 0..n {
                            let i = r * d + c;
                            let gh = g[i] * gamma[c];
                            dx[i] += cache.inv_std[c] / nf * (nf * gh - sum_g - cache.xhat[i] * sum_gx);
                        }
                    }
                } else {
                    for r in 0..n {
                        for c in 0..d {
                            let i = r * d + c;
                            dx[i] += g[i] * gamma[c] * cache.inv_std[c];
                        }
                    }
                }
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let adj = op.backward(&vals, out, g);
                for (v, a) in inputs.iter().zip(adj) {
                    if let Some(a) = a {
                        let n = self.value(*v).numel();
                        axpy(slot(grads, *v, n), 1.0, &a);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
