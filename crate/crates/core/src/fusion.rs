//! Entropy-confidence fusion and the dual-branch block.
//!
//! Each branch output is turned into per-node distributions with a softmax
//! over its feature axis. The mean normalized entropy `H` of those rows gives
//! a confidence `w = 1 − H`, and the block mixes the branches with
//! `α = w_mamba / (w_sg + w_mamba)`, one `α` per graph.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::{BatchNorm, Ctx, Linear, Mlp};
use crate::diffcore::{CustomOp, ParamStore, Segments, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gnn::{sg_branch_forward, EdgeIndex, GinLayerParams, GinOptions};
use crate::ssm::{mamba_branch_forward, ScanKind, SelectiveSsmParams};

/// Below this confidence sum both branches count as equally (un)certain.
pub const DEGENERATE_DENOM: f64 = 1e-12;

/// Per-graph, per-block record of the fusion decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionTrace {
    pub block_index: usize,
    pub h_sg: f64,
    pub h_mamba: f64,
    pub w_sg: f64,
    pub w_mamba: f64,
    pub alpha: f64,
}

impl FusionTrace {
    fn from_entropies(block_index: usize, h_sg: f64, h_mamba: f64) -> Self {
        let (w_sg, w_mamba) = (1.0 - h_sg, 1.0 - h_mamba);
        Self {
            block_index,
            h_sg,
            h_mamba,
            w_sg,
            w_mamba,
            alpha: alpha_from_weights(w_sg, w_mamba),
        }
    }
}

/// `w_mamba / (w_sg + w_mamba)`, or 0.5 when the sum is at most
/// [`DEGENERATE_DENOM`].
pub fn alpha_from_weights(w_sg: f64, w_mamba: f64) -> f64 {
    let den = w_sg + w_mamba;
    if !(den > DEGENERATE_DENOM) {
        return 0.5;
    }
    // The smaller share is snapped to the 2^-53 grid of its complement, so
    // `α` and `1 − α` are both exact and swapping the inputs gives exactly
    // `1 − α`.
    let alpha = if w_mamba <= w_sg {
        1.0 - (1.0 - w_mamba / den)
    } else {
        1.0 - w_sg / den
    };
    alpha.clamp(0.0, 1.0)
}

/// `−Σ p log p / log C` of a probability vector; zero entries contribute 0.
pub fn normalized_entropy(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::contract(format!("entropy needs at least 2 classes, got {}", p.len())));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::contract("probabilities must be finite and non-negative"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("probabilities sum to {total}, not 1")));
    }
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    Ok((h / (p.len() as f64).ln()).clamp(0.0, 1.0))
}

fn mean_row_entropy(rows: &Tensor) -> Result<f64> {
    let n = rows.rows();
    if n == 0 {
        return Err(Error::dim("entropy over zero rows"));
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += normalized_entropy(rows.row(i))?;
    }
    Ok(acc / n as f64)
}

/// Confidence weighting from two row-stochastic `n × C` matrices. The trace
/// carries `block_index` 0.
pub fn entropy_confidence(y_sg: &Tensor, y_mamba: &Tensor) -> Result<(f64, FusionTrace)> {
    if y_sg.rows() != y_mamba.rows() {
        return Err(Error::dim(format!(
            "branch outputs have {} and {} rows",
            y_sg.rows(),
            y_mamba.rows()
        )));
    }
    let trace = FusionTrace::from_entropies(0, mean_row_entropy(y_sg)?, mean_row_entropy(y_mamba)?);
    Ok((trace.alpha, trace))
}

/// Normalized entropy of `softmax(x)` for each row of logits, plus
/// `∂H/∂x` when requested. Works in log space so saturated rows stay finite.
fn logit_row_entropy(x: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
    let c = x.len();
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let log_c = (c as f64).ln();
    let mut s = 0.0;
    for &v in x {
        let lp = v - lse;
        s -= lp.exp() * lp;
    }
    let grad = if want_grad {
        x.iter()
            .map(|&v| {
                let lp = v - lse;
                -lp.exp() * (lp + s) / log_c
            })
            .collect()
    } else {
        Vec::new()
    };
    (s / log_c, grad)
}

/// Mean normalized softmax entropy of the rows of `x` within each segment.
pub fn segment_entropies(x: &Tensor, segs: &Segments) -> Result<Vec<f64>> {
    if x.cols() < 2 {
        return Err(Error::contract(format!("entropy needs at least 2 classes, got {}", x.cols())));
    }
    if segs.total() != x.rows() {
        return Err(Error::dim(format!("segments cover {} of {} rows", segs.total(), x.rows())));
    }
    Ok(segs
        .iter()
        .map(|r| {
            let n = r.len().max(1) as f64;
            let h: f64 = r.map(|i| logit_row_entropy(x.row(i), false).0).sum();
            (h / n).clamp(0.0, 1.0)
        })
        .collect())
}

/// `α` per segment as a differentiable function of both branch logits.
struct EntropyAlphaOp {
    segs: Segments,
    h_sg: Vec<f64>,
    h_m: Vec<f64>,
}

impl CustomOp for EntropyAlphaOp {
    fn name(&self) -> &'static str {
        "entropy_alpha"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (sg, m) = (inputs[0], inputs[1]);
        let c = sg.cols();
        let mut g_sg = vec![0.0; sg.numel()];
        let mut g_m = vec![0.0; m.numel()];
        for (b, r) in self.segs.iter().enumerate() {
            let (w_s, w_m) = (1.0 - self.h_sg[b], 1.0 - self.h_m[b]);
            let den = w_s + w_m;
            if den <= DEGENERATE_DENOM || r.is_empty() {
                continue;
            }
            // ∂α/∂H = −∂α/∂w
            let d_hs = grad[b] * w_m / (den * den);
            let d_hm = -grad[b] * w_s / (den * den);
            let n = r.len() as f64;
            for i in r {
                let (_, gs) = logit_row_entropy(sg.row(i), true);
                let (_, gm) = logit_row_entropy(m.row(i), true);
                for k in 0..c {
                    g_sg[i * c + k] += d_hs * gs[k] / n;
                    g_m[i * c + k] += d_hm * gm[k] / n;
                }
            }
        }
        vec![Some(g_sg), Some(g_m)]
    }
}

/// Records `α` per segment. With `differentiable` false the result is a
/// tape constant, so no gradient reaches the entropy computation.
pub fn alpha_from_logits(
    tape: &mut Tape,
    x_sg: Var,
    x_m: Var,
    segs: &Segments,
    differentiable: bool,
) -> Result<(Var, Vec<(f64, f64)>)> {
    let (vs, vm) = (tape.value(x_sg), tape.value(x_m));
    if vs.shape() != vm.shape() {
        return Err(Error::dim(format!("branch outputs {:?} and {:?} differ", vs.shape(), vm.shape())));
    }
    let h_sg = segment_entropies(vs, segs)?;
    let h_m = segment_entropies(vm, segs)?;
    let alpha: Vec<f64> = h_sg
        .iter()
        .zip(&h_m)
        .map(|(&a, &b)| alpha_from_weights(1.0 - a, 1.0 - b))
        .collect();
    let entropies = h_sg.iter().copied().zip(h_m.iter().copied()).collect();
    let value = Tensor::vector(alpha);
    let var = if differentiable {
        let op = EntropyAlphaOp {
            segs: segs.clone(),
            h_sg,
            h_m,
        };
        tape.custom(vec![x_sg, x_m], value, Box::new(op))
    } else {
        tape.constant(value)
    };
    Ok((var, entropies))
}

/// `(1 − α_g)·sg + α_g·m` row-wise, `α_g` taken from the row's segment.
struct MixOp {
    segs: Segments,
}

impl CustomOp for MixOp {
    fn name(&self) -> &'static str {
        "alpha_mix"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (sg, m, alpha) = (inputs[0], inputs[1], inputs[2].data());
        let c = sg.cols();
        let mut g_sg = vec![0.0; grad.len()];
        let mut g_m = vec![0.0; grad.len()];
        let mut g_a = vec![0.0; alpha.len()];
        for (b, r) in self.segs.iter().enumerate() {
            let a = alpha[b];
            for k in r.start * c..r.end * c {
                g_sg[k] = (1.0 - a) * grad[k];
                g_m[k] = a * grad[k];
                g_a[b] += grad[k] * (m.data()[k] - sg.data()[k]);
            }
        }
        vec![Some(g_sg), Some(g_m), Some(g_a)]
    }
}

/// Convex per-segment mix of two row-aligned branch outputs.
pub fn mix_segments(tape: &mut Tape, sg: Var, m: Var, alpha: Var, segs: &Segments) -> Result<Var> {
    let (vs, vm, va) = (tape.value(sg), tape.value(m), tape.value(alpha));
    if vs.shape() != vm.shape() {
        return Err(Error::dim(format!("branch outputs {:?} and {:?} differ", vs.shape(), vm.shape())));
    }
    if va.numel() != segs.count() || segs.total() != vs.rows() {
        return Err(Error::dim(format!(
            "{} mixing weights and {} segments over {} rows",
            va.numel(),
            segs.count(),
            vs.rows()
        )));
    }
    let c = vs.cols();
    let mut out = vec![0.0; vs.numel()];
    for (b, r) in segs.iter().enumerate() {
        let a = va.data()[b];
        for k in r.start * c..r.end * c {
            out[k] = (1.0 - a) * vs.data()[k] + a * vm.data()[k];
        }
    }
    let value = Tensor::new(vs.shape().to_vec(), out)?;
    Ok(tape.custom(vec![sg, m, alpha], value, Box::new(MixOp { segs: segs.clone() })))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    Both,
    SgOnly,
    MambaOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    /// Entropy-confidence weighting.
    Entropy,
    /// Constant mixing weight.
    Fixed(f64),
}

/// What the branch softmax is taken over when measuring confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSource {
    /// Softmax over the hidden feature axis (`C = d_hidden`).
    #[default]
    Features,
    /// Softmax over `[z, 0]` from a per-branch node-level logit head (`C = 2`).
    AuxHead,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockOptions {
    pub branches: Branches,
    pub alpha: AlphaRule,
    pub grad_through_alpha: bool,
    pub confidence: ConfidenceSource,
    pub scan: ScanKind,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            branches: Branches::Both,
            alpha: AlphaRule::Entropy,
            grad_through_alpha: false,
            confidence: ConfidenceSource::Features,
            scan: ScanKind::Parallel,
        }
    }
}

/// Widths shared by every block of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockDims {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_state: usize,
    pub pe_dim: usize,
    pub dropout: f64,
    pub gin_message_relu: bool,
}

/// Parameters of one dual-branch block. Absent branches have no weights.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub index: usize,
    pub node_proj: Linear,
    pub gin: Option<GinLayerParams>,
    pub ssm: Option<SelectiveSsmParams>,
    pub aux: Option<(Linear, Linear)>,
    pub refine: Mlp,
    pub bn: BatchNorm,
    pub opts: BlockOptions,
}

impl BlockParams {
    /// `rng_for(name)` supplies the initialization stream of each sub-module,
    /// so a sub-module's initial weights do not depend on which other
    /// sub-modules exist.
    pub fn new(
        store: &mut ParamStore,
        index: usize,
        dims: BlockDims,
        opts: BlockOptions,
        rng_for: &mut dyn FnMut(&str) -> ChaCha8Rng,
    ) -> Result<Self> {
        let p = format!("block{index}");
        let d = dims.d_hidden;
        let name = |s: &str| format!("{p}.{s}");
        let node_proj = Linear::new(store, &name("node_proj"), dims.d_in, d, true, &mut rng_for(&name("node_proj")))?;
        let gin = match opts.branches {
            Branches::MambaOnly => None,
            _ => {
                let g = GinOptions {
                    message_relu: dims.gin_message_relu,
                    batchnorm: true,
                    dropout: dims.dropout,
                };
                Some(GinLayerParams::new(store, &name("gin"), d, 2, g, &mut rng_for(&name("gin")))?)
            }
        };
        let ssm = match opts.branches {
            Branches::SgOnly => None,
            _ => Some(SelectiveSsmParams::new(
                store,
                &name("ssm"),
                d + dims.pe_dim,
                d,
                dims.d_state,
                d,
                dims.dropout,
                &mut rng_for(&name("ssm")),
            )?),
        };
        let aux = if opts.branches == Branches::Both && opts.confidence == ConfidenceSource::AuxHead {
            let a = Linear::new(store, &name("aux_sg"), d, 1, true, &mut rng_for(&name("aux_sg")))?;
            let b = Linear::new(store, &name("aux_mamba"), d, 1, true, &mut rng_for(&name("aux_mamba")))?;
            Some((a, b))
        } else {
            None
        };
        let refine = Mlp::new(store, &name("refine"), &[d, d, d], &mut rng_for(&name("refine")))?;
        let bn = BatchNorm::new(store, &name("bn"), d)?;
        Ok(Self {
            index,
            node_proj,
            gin,
            ssm,
            aux,
            refine,
            bn,
            opts,
        })
    }
}

/// Graph structure shared by all blocks of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BlockInput<'a> {
    pub edges: &'a EdgeIndex,
    pub edge_feats: Var,
    pub pos_enc: Var,
    pub order: &'a [usize],
    pub segs: &'a Segments,
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub out: Var,
    /// One entry per segment when both branches ran.
    pub traces: Vec<FusionTrace>,
    /// Per-branch node logits `(sg, mamba)` of the auxiliary heads.
    pub aux_logits: Option<(Var, Var)>,
}

fn aux_rows(tape: &mut Tape, z: Var) -> Result<Var> {
    let zeros = tape.constant(Tensor::zeros(&[tape.value(z).rows(), 1]));
    tape.concat_cols(z, zeros)
}

/// One block: node projection, branches, fusion, then
/// `BatchNorm(MLP(fused) + fused)`. `alpha_override` replaces the mixing
/// weight of every segment (traces still report the entropies).
pub fn slidemamba_block(
    tape: &mut Tape,
    store: &ParamStore,
    params: &BlockParams,
    input: &BlockInput<'_>,
    x: Var,
    alpha_override: Option<&[f64]>,
    ctx: &mut Ctx<'_>,
) -> Result<BlockOutput> {
    let x_hat = params.node_proj.forward(tape, store, x)?;
    let x_sg = match &params.gin {
        Some(g) => Some(sg_branch_forward(
            tape,
            store,
            std::slice::from_ref(g),
            input.edges,
            x_hat,
            input.edge_feats,
            ctx,
        )?),
        None => None,
    };
    let x_m = match &params.ssm {
        Some(s) => Some(mamba_branch_forward(
            tape,
            store,
            s,
            x_hat,
            input.pos_enc,
            input.order,
            input.segs,
            params.opts.scan,
            ctx,
        )?),
        None => None,
    };
    let mut traces = Vec::new();
    let mut aux_logits = None;
    let fused = match (x_sg, x_m) {
        (Some(sg), Some(m)) => {
            let (conf_sg, conf_m) = match &params.aux {
                Some((head_sg, head_m)) => {
                    let zs = head_sg.forward(tape, store, sg)?;
                    let zm = head_m.forward(tape, store, m)?;
                    aux_logits = Some((zs, zm));
                    (aux_rows(tape, zs)?, aux_rows(tape, zm)?)
                }
                None => (sg, m),
            };
            let (entropy_alpha, entropies) =
                alpha_from_logits(tape, conf_sg, conf_m, input.segs, params.opts.grad_through_alpha)?;
            let alpha = match (alpha_override, params.opts.alpha) {
                (Some(a), _) => tape.constant(Tensor::vector(a.to_vec())),
                (None, AlphaRule::Entropy) => entropy_alpha,
                (None, AlphaRule::Fixed(a)) => tape.constant(Tensor::full(&[input.segs.count()], a)),
            };
            let alpha_vals = tape.value(alpha).data().to_vec();
            traces = entropies
                .iter()
                .zip(alpha_vals)
                .map(|(&(hs, hm), a)| FusionTrace {
                    alpha: a,
                    ..FusionTrace::from_entropies(params.index, hs, hm)
                })
                .collect();
            mix_segments(tape, sg, m, alpha, input.segs)?
        }
        (Some(sg), None) => sg,
        (None, Some(m)) => m,
        (None, None) => return Err(Error::config("block without branches")),
    };
    let refined = params.refine.forward(tape, store, fused)?;
    let res = tape.add(refined, fused)?;
    let out = params.bn.forward(tape, store, res, ctx)?;
    Ok(BlockOutput { out, traces, aux_logits })
}
