//! Short-range branch: GIN message passing with additive edge terms.
//!
//! `h_v' = MLP((1+ε)·h_v + Σ_{u→v} ReLU(h_u + edge_proj(e_uv)))`, followed by
//! batch normalization, ReLU and dropout.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::nn::{dropout, BatchNorm, Ctx, Linear, Mlp};
use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Directed edge list in message-passing form. Edges are ordered by
/// `(target, source)` so every node sums its messages in source order.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    pub n_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl EdgeIndex {
    /// Builds the index from `(source, target)` pairs and returns it with the
    /// permutation that maps new edge positions to the input positions.
    pub fn new(n_nodes: usize, edges: &[[usize; 2]]) -> Result<(Self, Vec<usize>)> {
        if let Some(e) = edges.iter().find(|e| e[0] >= n_nodes || e[1] >= n_nodes) {
            return Err(Error::dim(format!("edge {e:?} out of range for {n_nodes} nodes")));
        }
        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.sort_by_key(|&i| (edges[i][1], edges[i][0]));
        let src = order.iter().map(|&i| edges[i][0]).collect();
        let dst = order.iter().map(|&i| edges[i][1]).collect();
        Ok((Self { n_nodes, src, dst }, order))
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GinOptions {
    /// ReLU on `h_u + edge term` before summation.
    pub message_relu: bool,
    pub batchnorm: bool,
    pub dropout: f64,
}

impl Default for GinOptions {
    fn default() -> Self {
        Self {
            message_relu: true,
            batchnorm: true,
            dropout: 0.1,
        }
    }
}

/// One GIN layer: ε, the 2-layer update MLP, the edge-feature projection and
/// the output batch norm.
#[derive(Debug, Clone)]
pub struct GinLayerParams {
    pub d_hidden: usize,
    pub epsilon: ParamId,
    pub mlp: Mlp,
    pub edge_proj: Linear,
    pub bn: BatchNorm,
    pub opts: GinOptions,
}

impl GinLayerParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_hidden: usize,
        d_edge: usize,
        opts: GinOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            d_hidden,
            epsilon: store.add_param(&format!("{prefix}.eps"), Tensor::scalar(0.0))?,
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), &[d_hidden, d_hidden, d_hidden], rng)?,
            edge_proj: Linear::new(store, &format!("{prefix}.edge_proj"), d_edge, d_hidden, true, rng)?,
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), d_hidden)?,
            opts,
        })
    }

    /// Edge embeddings `Ê = edge_proj(E)`, one row per edge.
    pub fn embed_edges(&self, tape: &mut Tape, store: &ParamStore, edge_feats: Var) -> Result<Var> {
        self.edge_proj.forward(tape, store, edge_feats)
    }
}

/// GIN aggregation and update without the post-MLP
/// normalization: `MLP((1+ε)·h + Σ msg)`.
pub fn gin_aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GinLayerParams,
    index: &EdgeIndex,
    h: Var,
    edge_emb: Var,
) -> Result<Var> {
    let (n, d) = (tape.value(h).rows(), tape.value(h).cols());
    if n != index.n_nodes {
        return Err(Error::dim(format!("{n} feature rows for {} nodes", index.n_nodes)));
    }
    if d != params.d_hidden {
        return Err(Error::dim(format!("feature width {d}, layer expects {}", params.d_hidden)));
    }
    let eps = tape.param(store, params.epsilon);
    let scaled = tape.mul_scalar(h, eps)?;
    let mut z = tape.add(h, scaled)?;
    if !index.is_empty() {
        let e = tape.value(edge_emb);
        if e.rows() != index.len() || e.cols() != d {
            return Err(Error::dim(format!(
                "edge embeddings {:?} for {} edges of width {d}",
                e.shape(),
                index.len()
            )));
        }
        let src = tape.gather_rows(h, index.src.clone())?;
        let mut msg = tape.add(src, edge_emb)?;
        if params.opts.message_relu {
            msg = tape.relu(msg);
        }
        let agg = tape.scatter_add_rows(msg, index.dst.clone(), n)?;
        z = tape.add(z, agg)?;
    }
    params.mlp.forward(tape, store, z)
}

/// Full GIN layer: aggregate/update, then batch norm, ReLU and dropout.
pub fn gin_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GinLayerParams,
    index: &EdgeIndex,
    h: Var,
    edge_emb: Var,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    let mut out = gin_aggregate(tape, store, params, index, h, edge_emb)?;
    if params.opts.batchnorm {
        out = params.bn.forward(tape, store, out, ctx)?;
    }
    out = tape.relu(out);
    dropout(tape, out, params.opts.dropout, ctx)
}

/// Stacks `layers.len()` GIN layers over the projected node features; each
/// layer embeds the raw edge features with its own projection.
pub fn sg_branch_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layers: &[GinLayerParams],
    index: &EdgeIndex,
    x_node: Var,
    edge_feats: Var,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    let mut h = x_node;
    for layer in layers {
        let emb = layer.embed_edges(tape, store, edge_feats)?;
        h = gin_forward(tape, store, layer, index, h, emb, ctx)?;
    }
    Ok(h)
}
