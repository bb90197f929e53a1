//! Full models: stacked dual-branch blocks, pooling and a classifier head,
//! plus the single-branch, fixed-mix and mean-pool baselines.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::{Ctx, Linear, Mlp};
use crate::diffcore::{
    derive_seed, finite_difference_check, load_checkpoint, save_checkpoint, sigmoid, AdamState, Checkpoint, CustomOp,
    FdOptions, FdReport, ParamStore, Segments, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::fusion::{
    slidemamba_block, AlphaRule, BlockDims, BlockInput, BlockOptions, BlockParams, Branches, ConfidenceSource,
    FusionTrace,
};
use crate::gnn::EdgeIndex;
use crate::graph::TileGraph;
use crate::ssm::ScanKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Slidemamba,
    GnnOnly,
    MambaOnly,
    FixedSumHybrid,
    MilMeanpool,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Slidemamba,
        ModelKind::GnnOnly,
        ModelKind::MambaOnly,
        ModelKind::FixedSumHybrid,
        ModelKind::MilMeanpool,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Slidemamba => "slidemamba",
            ModelKind::GnnOnly => "gnn_only",
            ModelKind::MambaOnly => "mamba_only",
            ModelKind::FixedSumHybrid => "fixed_sum_hybrid",
            ModelKind::MilMeanpool => "mil_meanpool",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown model kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Node feature width of the input graphs.
    pub d_in: usize,
    pub d_hidden: usize,
    pub n_blocks: usize,
    pub d_state: usize,
    pub pe_dim: usize,
    pub dropout: f64,
    /// Mixing weight of `fixed_sum_hybrid`.
    pub fixed_alpha: f64,
    pub seed: u64,
    pub scan: ScanKind,
    pub grad_through_alpha: bool,
    pub gin_message_relu: bool,
    /// Gated attention pooling instead of the mean for `mil_meanpool`.
    pub attention_pool: bool,
    pub confidence_source: ConfidenceSource,
    /// Weight of the auxiliary-head loss when `confidence_source = aux_head`.
    pub aux_loss_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Slidemamba,
            d_in: 64,
            d_hidden: 32,
            n_blocks: 2,
            d_state: 8,
            pe_dim: 16,
            dropout: 0.1,
            fixed_alpha: 0.5,
            seed: 0,
            scan: ScanKind::Parallel,
            grad_through_alpha: false,
            gin_message_relu: true,
            attention_pool: false,
            confidence_source: ConfidenceSource::Features,
            aux_loss_weight: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.d_in == 0 {
            return fail("model.d_in must be positive".into());
        }
        if self.d_hidden < 2 {
            return fail(format!("model.d_hidden must be at least 2, got {}", self.d_hidden));
        }
        if self.n_blocks == 0 && self.kind != ModelKind::MilMeanpool {
            return fail("model.n_blocks must be at least 1".into());
        }
        if self.d_state == 0 {
            return fail("model.d_state must be positive".into());
        }
        if self.pe_dim % 4 != 0 {
            return fail(format!("model.pe_dim must be a multiple of 4, got {}", self.pe_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("model.dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.fixed_alpha) {
            return fail(format!("model.fixed_alpha must be in [0, 1], got {}", self.fixed_alpha));
        }
        if !(self.aux_loss_weight >= 0.0) {
            return fail("model.aux_loss_weight must be non-negative".into());
        }
        Ok(())
    }

    fn block_options(&self) -> Option<BlockOptions> {
        let (branches, alpha) = match self.kind {
            ModelKind::Slidemamba => (Branches::Both, AlphaRule::Entropy),
            ModelKind::GnnOnly => (Branches::SgOnly, AlphaRule::Entropy),
            ModelKind::MambaOnly => (Branches::MambaOnly, AlphaRule::Entropy),
            ModelKind::FixedSumHybrid => (Branches::Both, AlphaRule::Fixed(self.fixed_alpha)),
            ModelKind::MilMeanpool => return None,
        };
        Some(BlockOptions {
            branches,
            alpha,
            grad_through_alpha: self.grad_through_alpha,
            confidence: self.confidence_source,
            scan: self.scan,
        })
    }
}

/// Several graphs as one disjoint union: rows are stacked, edges offset, and
/// `segs` marks where each graph's nodes start.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub features: Tensor,
    pub pos_enc: Tensor,
    pub edges: EdgeIndex,
    /// Edge feature rows in `edges` order.
    pub edge_features: Tensor,
    pub segs: Segments,
    /// Raster order (by y, then x) of the nodes of each graph, as global ids.
    pub order: Vec<usize>,
    pub labels: Vec<f64>,
    pub slide_ids: Vec<String>,
}

/// Node ids of one graph sorted by `(y, x, id)`.
pub fn raster_order(coords: &[[f64; 2]]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..coords.len()).collect();
    idx.sort_by(|&a, &b| {
        coords[a][1]
            .total_cmp(&coords[b][1])
            .then(coords[a][0].total_cmp(&coords[b][0]))
            .then(a.cmp(&b))
    });
    idx
}

impl GraphBatch {
    pub fn new(graphs: &[&TileGraph]) -> Result<Self> {
        let first = graphs.first().ok_or_else(|| Error::contract("empty graph batch"))?;
        let (d, pe) = (first.feature_dim(), first.pe_dim());
        let n: usize = graphs.iter().map(|g| g.n_nodes).sum();
        let mut features = Vec::with_capacity(n * d);
        let mut pos_enc = Vec::with_capacity(n * pe);
        let mut edges = Vec::new();
        let mut edge_rows = Vec::new();
        let mut order = Vec::with_capacity(n);
        let mut lengths = Vec::with_capacity(graphs.len());
        let mut offset = 0;
        for g in graphs {
            if g.feature_dim() != d || g.pe_dim() != pe {
                return Err(Error::dim(format!(
                    "graph `{}` has feature/PE widths {}/{}, batch uses {d}/{pe}",
                    g.slide_id,
                    g.feature_dim(),
                    g.pe_dim()
                )));
            }
            g.node_features.iter().for_each(|r| features.extend_from_slice(r));
            g.pos_enc.iter().for_each(|r| pos_enc.extend_from_slice(r));
            edges.extend(g.edges.iter().map(|&[u, v]| [u + offset, v + offset]));
            edge_rows.extend(g.edge_features.iter().copied());
            order.extend(raster_order(&g.coords).into_iter().map(|i| i + offset));
            lengths.push(g.n_nodes);
            offset += g.n_nodes;
        }
        let (index, perm) = EdgeIndex::new(n, &edges)?;
        let edge_features: Vec<f64> = perm.iter().flat_map(|&i| edge_rows[i]).collect();
        Ok(Self {
            features: Tensor::new(vec![n, d], features)?,
            pos_enc: Tensor::new(vec![n, pe], pos_enc)?,
            edges: index,
            edge_features: Tensor::new(vec![perm.len(), 2], edge_features)?,
            segs: Segments::from_lengths(&lengths),
            order,
            labels: graphs.iter().map(|g| f64::from(g.label)).collect(),
            slide_ids: graphs.iter().map(|g| g.slide_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.segs.count()
    }

    pub fn is_empty(&self) -> bool {
        self.segs.count() == 0
    }
}

/// Gated attention pooling weights `softmax_g(s)` within each segment.
struct SegmentAttnPoolOp {
    segs: Segments,
    weights: Vec<f64>,
}

impl CustomOp for SegmentAttnPoolOp {
    fn name(&self) -> &'static str {
        "segment_attention_pool"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let h = inputs[0];
        let d = h.cols();
        let mut gh = vec![0.0; h.numel()];
        let mut gs = vec![0.0; h.rows()];
        for (b, r) in self.segs.iter().enumerate() {
            let gb = &grad[b * d..(b + 1) * d];
            let pooled = output.row(b);
            let g_dot_out: f64 = gb.iter().zip(pooled).map(|(x, y)| x * y).sum();
            for i in r {
                let a = self.weights[i];
                let hi = h.row(i);
                let mut g_dot_h = 0.0;
                for c in 0..d {
                    gh[i * d + c] = a * gb[c];
                    g_dot_h += gb[c] * hi[c];
                }
                gs[i] = a * (g_dot_h - g_dot_out);
            }
        }
        vec![Some(gh), Some(gs)]
    }
}

fn segment_attention_pool(tape: &mut Tape, h: Var, scores: Var, segs: &Segments) -> Result<Var> {
    let (hv, sv) = (tape.value(h), tape.value(scores));
    if sv.numel() != hv.rows() || segs.total() != hv.rows() {
        return Err(Error::dim("attention scores misaligned with node rows"));
    }
    let d = hv.cols();
    let mut weights = vec![0.0; hv.rows()];
    let mut out = vec![0.0; segs.count() * d];
    for (b, r) in segs.iter().enumerate() {
        let s = &sv.data()[r.clone()];
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - max).exp()).sum();
        for i in r {
            let a = (sv.data()[i] - max).exp() / z;
            weights[i] = a;
            for c in 0..d {
                out[b * d + c] += a * hv.get2(i, c);
            }
        }
    }
    let value = Tensor::new(vec![segs.count(), d], out)?;
    let op = SegmentAttnPoolOp {
        segs: segs.clone(),
        weights,
    };
    Ok(tape.custom(vec![h, scores], value, Box::new(op)))
}

/// Numerically stable binary cross-entropy with logits.
pub fn bce_loss(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

struct BceOp {
    labels: Vec<f64>,
}

impl CustomOp for BceOp {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = self.labels.len() as f64;
        let g = inputs[0]
            .data()
            .iter()
            .zip(&self.labels)
            .map(|(&z, &y)| grad[0] * (sigmoid(z) - y) / n)
            .collect();
        vec![Some(g)]
    }
}

/// Mean binary cross-entropy of a column of logits.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, labels: &[f64]) -> Result<Var> {
    let z = tape.value(logits);
    if z.numel() != labels.len() || labels.is_empty() {
        return Err(Error::dim(format!("{} logits for {} labels", z.numel(), labels.len())));
    }
    let loss = z.data().iter().zip(labels).map(|(&z, &y)| bce_loss(z, y)).sum::<f64>() / labels.len() as f64;
    let op = BceOp {
        labels: labels.to_vec(),
    };
    Ok(tape.custom(vec![logits], Tensor::scalar(loss), Box::new(op)))
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B × 1` slide logits.
    pub logits: Var,
    /// `traces[block][graph]`; empty for models without fusion.
    pub traces: Vec<Vec<FusionTrace>>,
    /// Auxiliary node logits `(sg, mamba)` per block.
    pub aux_logits: Vec<(Var, Var)>,
}

impl ForwardOutput {
    /// Mixing weights actually used, `[block][graph]`, for freezing.
    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.traces.iter().map(|b| b.iter().map(|t| t.alpha).collect()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    blocks: Vec<BlockParams>,
    mil_proj: Option<Linear>,
    attn: Option<Mlp>,
    head: Mlp,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let seed = config.seed;
        let mut rng_for = |name: &str| ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let d = config.d_hidden;
        let mut blocks = Vec::new();
        let mut mil_proj = None;
        let mut attn = None;
        match config.block_options() {
            Some(opts) => {
                for k in 0..config.n_blocks {
                    let dims = BlockDims {
                        d_in: if k == 0 { config.d_in } else { d },
                        d_hidden: d,
                        d_state: config.d_state,
                        pe_dim: config.pe_dim,
                        dropout: config.dropout,
                        gin_message_relu: config.gin_message_relu,
                    };
                    blocks.push(BlockParams::new(&mut store, k, dims, opts, &mut rng_for)?);
                }
            }
            None => {
                let proj = Linear::new(&mut store, "mil.node_proj", config.d_in, d, true, &mut rng_for("mil.node_proj"))?;
                mil_proj = Some(proj);
                if config.attention_pool {
                    attn = Some(Mlp::new(&mut store, "mil.attn", &[d, d, 1], &mut rng_for("mil.attn"))?);
                }
            }
        }
        let head = Mlp::new(&mut store, "head", &[d, d, 1], &mut rng_for("head"))?;
        Ok(Self {
            config,
            store,
            blocks,
            mil_proj,
            attn,
            head,
        })
    }

    /// Trainable scalar count.
    pub fn count_params(&self) -> usize {
        self.store.count_trainable()
    }

    /// Forward pass over a batch. `frozen_alpha[block][graph]` pins the mixing
    /// weights (gradient checks).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &GraphBatch,
        frozen_alpha: Option<&[Vec<f64>]>,
        ctx: &mut Ctx<'_>,
    ) -> Result<ForwardOutput> {
        let (d_in, pe) = (batch.features.cols(), batch.pos_enc.cols());
        if d_in != self.config.d_in {
            return Err(Error::dim(format!("graphs carry {d_in} features, model expects {}", self.config.d_in)));
        }
        if !self.blocks.is_empty() && pe != self.config.pe_dim {
            return Err(Error::dim(format!("graphs carry {pe} PE columns, model expects {}", self.config.pe_dim)));
        }
        let mut x = tape.constant(batch.features.clone());
        let mut traces = Vec::new();
        let mut aux_logits = Vec::new();
        let pooled = if let Some(proj) = &self.mil_proj {
            let h = proj.forward(tape, store, x)?;
            let h = tape.relu(h);
            match &self.attn {
                Some(attn) => {
                    let s = attn.forward(tape, store, h)?;
                    segment_attention_pool(tape, h, s, &batch.segs)?
                }
                None => tape.segment_mean(h, &batch.segs)?,
            }
        } else {
            let input = BlockInput {
                edges: &batch.edges,
                edge_feats: tape.constant(batch.edge_features.clone()),
                pos_enc: tape.constant(batch.pos_enc.clone()),
                order: &batch.order,
                segs: &batch.segs,
            };
            for (k, block) in self.blocks.iter().enumerate() {
                let frozen = frozen_alpha.and_then(|f| f.get(k)).map(Vec::as_slice);
                let out = slidemamba_block(tape, store, block, &input, x, frozen, ctx)?;
                x = out.out;
                if !out.traces.is_empty() {
                    traces.push(out.traces);
                }
                aux_logits.extend(out.aux_logits);
            }
            tape.segment_mean(x, &batch.segs)?
        };
        let logits = self.head.forward(tape, store, pooled)?;
        Ok(ForwardOutput {
            logits,
            traces,
            aux_logits,
        })
    }

    /// Mean BCE over the batch, plus the weighted auxiliary-head terms.
    pub fn loss(&self, tape: &mut Tape, out: &ForwardOutput, batch: &GraphBatch) -> Result<Var> {
        let mut loss = bce_with_logits(tape, out.logits, &batch.labels)?;
        if !out.aux_logits.is_empty() && self.config.aux_loss_weight > 0.0 {
            let w = self.config.aux_loss_weight / (2 * out.aux_logits.len()) as f64;
            for &(zs, zm) in &out.aux_logits {
                for z in [zs, zm] {
                    let pooled = tape.segment_mean(z, &batch.segs)?;
                    let l = bce_with_logits(tape, pooled, &batch.labels)?;
                    let l = tape.scale(l, w);
                    loss = tape.add(loss, l)?;
                }
            }
        }
        Ok(loss)
    }

    /// Eval-mode logits and traces for a batch.
    pub fn predict(&self, batch: &GraphBatch) -> Result<(Vec<f64>, Vec<Vec<FusionTrace>>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &self.store, batch, None, &mut Ctx::eval())?;
        Ok((tape.value(out.logits).data().to_vec(), out.traces))
    }

    /// Folds `passes` train-mode batch statistics into the batch-norm running
    /// averages. Trainable parameters are left untouched.
    pub fn warm_running_stats(&mut self, batch: &GraphBatch, passes: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..passes {
            let mut tape = Tape::new();
            let mut ctx = Ctx::train(&mut rng);
            ctx.dropout_enabled = false;
            self.forward(&mut tape, &self.store, batch, None, &mut ctx)?;
            ctx.apply_bn_updates(&mut self.store);
        }
        Ok(())
    }

    /// Compares analytic and central-difference gradients of the eval-mode
    /// loss on `batch`, with every mixing weight frozen at its current value.
    pub fn gradient_check(&self, batch: &GraphBatch, opts: FdOptions) -> Result<FdReport> {
        let frozen = {
            let mut tape = Tape::new();
            self.forward(&mut tape, &self.store, batch, None, &mut Ctx::eval())?.alphas()
        };
        let mut store = self.store.clone();
        finite_difference_check(
            &mut store,
            |s, t| {
                let out = self.forward(t, s, batch, Some(&frozen), &mut Ctx::eval())?;
                self.loss(t, &out, batch)
            },
            opts,
        )
    }

    pub fn save(&self, path: &Path, adam: Option<&AdamState>) -> Result<()> {
        let config = serde_json::to_value(&self.config).map_err(|e| Error::contract(e.to_string()))?;
        save_checkpoint(path, &self.store, adam, Some(&config))
    }

    /// Rebuilds a model from a checkpoint that embeds its configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let value = ckpt
            .config
            .as_ref()
            .ok_or_else(|| Error::parse("__config__", "checkpoint has no model configuration"))?;
        let config: ModelConfig =
            serde_json::from_value(value.clone()).map_err(|e| Error::parse("__config__", e.to_string()))?;
        let mut model = Self::new(config)?;
        if model.store.len() != ckpt.params.len() {
            return Err(Error::parse(
                "params",
                format!("checkpoint has {} tensors, model has {}", ckpt.params.len(), model.store.len()),
            ));
        }
        model.store.load_values_from(&ckpt.params)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<AdamState>)> {
        let ckpt = load_checkpoint(path)?;
        let model = Self::from_checkpoint(&ckpt)?;
        let adam = ckpt.adam_for(&model.store);
        Ok((model, adam))
    }
}
