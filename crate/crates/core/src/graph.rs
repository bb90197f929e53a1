//! Tile graphs: positional encodings, k-NN connectivity, edge features and
//! the on-disk formats (graph JSON, feature CSV, dataset manifest).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_PE_DIM: usize = 16;

/// One slide as a graph of tiles.
///
/// `coords` are tile-grid indices `(column, row)`. `edges` are directed
/// `(source, target)` pairs, symmetric as a set, sorted and duplicate-free;
/// `edge_features[e]` is `[cosine_similarity, euclidean_distance]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGraph {
    pub slide_id: String,
    pub label: u8,
    pub n_nodes: usize,
    pub coords: Vec<[f64; 2]>,
    pub node_features: Vec<Vec<f64>>,
    pub pos_enc: Vec<Vec<f64>>,
    pub edges: Vec<[usize; 2]>,
    pub edge_features: Vec<[f64; 2]>,
}

impl TileGraph {
    pub fn feature_dim(&self) -> usize {
        self.node_features.first().map_or(0, Vec::len)
    }

    pub fn pe_dim(&self) -> usize {
        self.pos_enc.first().map_or(0, Vec::len)
    }

    /// Checks every structural invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes;
        if n == 0 {
            return Err(Error::parse("n_nodes", "graph has no nodes"));
        }
        if self.label > 1 {
            return Err(Error::parse("label", format!("label {} is not binary", self.label)));
        }
        for (field, len) in [
            ("coords", self.coords.len()),
            ("node_features", self.node_features.len()),
            ("pos_enc", self.pos_enc.len()),
        ] {
            if len != n {
                return Err(Error::parse(field, format!("{len} rows for {n} nodes")));
            }
        }
        let d = self.feature_dim();
        if let Some(i) = self.node_features.iter().position(|r| r.len() != d) {
            return Err(Error::parse("node_features", format!("row {i} is ragged")));
        }
        let p = self.pe_dim();
        if let Some(i) = self.pos_enc.iter().position(|r| r.len() != p) {
            return Err(Error::parse("pos_enc", format!("row {i} is ragged")));
        }
        if self.pos_enc.iter().flatten().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::parse("pos_enc", "value outside [-1, 1]"));
        }
        if self
            .coords
            .iter()
            .flatten()
            .chain(self.node_features.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::parse("node_features", "non-finite value"));
        }
        if self.edge_features.len() != self.edges.len() {
            return Err(Error::parse(
                "edge_features",
                format!("{} rows for {} edges", self.edge_features.len(), self.edges.len()),
            ));
        }
        for (i, &[u, v]) in self.edges.iter().enumerate() {
            if u >= n || v >= n {
                return Err(Error::parse("edges", format!("edge {i} ({u},{v}) out of range for {n} nodes")));
            }
            if u == v {
                return Err(Error::parse("edges", format!("edge {i} is a self-loop")));
            }
            if i > 0 && self.edges[i - 1] >= self.edges[i] {
                return Err(Error::parse("edges", format!("edge {i} is duplicated or out of order")));
            }
        }
        for &[u, v] in &self.edges {
            if self.edges.binary_search(&[v, u]).is_err() {
                return Err(Error::parse("edges", format!("edge ({u},{v}) lacks its reverse")));
            }
        }
        for (i, &[c, dist]) in self.edge_features.iter().enumerate() {
            if !(-1.0..=1.0).contains(&c) {
                return Err(Error::parse("edge_features", format!("cosine {c} at edge {i}")));
            }
            if !(dist >= 0.0) || !dist.is_finite() {
                return Err(Error::parse("edge_features", format!("distance {dist} at edge {i}")));
            }
        }
        Ok(())
    }

    /// Compact JSON bytes; deterministic for equal graphs.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("graph serializes")
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let g: TileGraph = serde_json::from_slice(bytes).map_err(json_field_error)?;
        g.validate()?;
        Ok(g)
    }
}

fn json_field_error(e: serde_json::Error) -> Error {
    // serde reports missing fields as "missing field `name`"
    let msg = e.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| "<document>".to_owned());
    Error::parse(field, msg)
}

/// 2-D sinusoidal encoding of a grid coordinate.
///
/// The first `dim/2` entries encode `x`, the rest `y`; within each half the
/// entries alternate `sin, cos` over `dim/4` frequencies `10000^(-4i/dim)`.
pub fn sinusoidal_pe(coord: [f64; 2], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::config(format!(
            "positional encoding width {dim} must be a positive multiple of 4"
        )));
    }
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for &c in &coord {
        for i in 0..quarter {
            let freq = 10000f64.powf(-4.0 * i as f64 / dim as f64);
            out.push((c * freq).sin());
            out.push((c * freq).cos());
        }
    }
    Ok(out)
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Directed k-NN picks (each node to its `min(k, n-1)` nearest others, ties
/// to the lower index), then symmetrized and sorted.
pub fn knn_edges(coords: &[[f64; 2]], k: usize) -> Vec<[usize; 2]> {
    let n = coords.len();
    let take = k.min(n.saturating_sub(1));
    if take == 0 {
        return Vec::new();
    }
    let mut edges = Vec::with_capacity(2 * n * take);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (u, &cu) in coords.iter().enumerate() {
        cand.clear();
        cand.extend((0..n).filter(|&v| v != u).map(|v| (sq_dist(cu, coords[v]), v)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if take < cand.len() {
            cand.select_nth_unstable_by(take - 1, cmp);
        }
        for &(_, v) in &cand[..take] {
            edges.push([u, v]);
            edges.push([v, u]);
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// `[cosine similarity of features, euclidean distance of coordinates]`.
/// A zero feature vector has cosine similarity 0.
pub fn edge_features(u_feat: &[f64], v_feat: &[f64], u_coord: [f64; 2], v_coord: [f64; 2]) -> Result<[f64; 2]> {
    if u_feat.len() != v_feat.len() {
        return Err(Error::dim(format!(
            "feature lengths {} and {} differ",
            u_feat.len(),
            v_feat.len()
        )));
    }
    let dot: f64 = u_feat.iter().zip(v_feat).map(|(a, b)| a * b).sum();
    let nu = u_feat.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v_feat.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cos = if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        (dot / (nu * nv)).clamp(-1.0, 1.0)
    };
    Ok([cos, sq_dist(u_coord, v_coord).sqrt()])
}

/// Assembles a validated [`TileGraph`] from aligned coordinates and features.
pub fn build_graph(
    slide_id: &str,
    label: u8,
    coords: &[[f64; 2]],
    node_features: Vec<Vec<f64>>,
    k: usize,
    pe_dim: usize,
) -> Result<TileGraph> {
    if coords.len() != node_features.len() {
        return Err(Error::dim(format!(
            "{} coordinates but {} feature rows",
            coords.len(),
            node_features.len()
        )));
    }
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let pos_enc = coords
        .iter()
        .map(|&c| sinusoidal_pe(c, pe_dim))
        .collect::<Result<Vec<_>>>()?;
    let edges = knn_edges(coords, k);
    let edge_feats = edges
        .iter()
        .map(|&[u, v]| edge_features(&node_features[u], &node_features[v], coords[u], coords[v]))
        .collect::<Result<Vec<_>>>()?;
    let g = TileGraph {
        slide_id: slide_id.to_owned(),
        label,
        n_nodes: coords.len(),
        coords: coords.to_vec(),
        node_features,
        pos_enc,
        edges,
        edge_features: edge_feats,
    };
    g.validate()?;
    Ok(g)
}

pub fn save_graph(path: &Path, g: &TileGraph) -> Result<()> {
    fs::write(path, g.to_json_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_graph(path: &Path) -> Result<TileGraph> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TileGraph::from_json_bytes(&bytes)
}

/// Reads a `tile_x,tile_y,f0,...,f{d-1}` CSV into coordinates and feature rows.
pub fn read_feature_csv(path: &Path) -> Result<(Vec<[f64; 2]>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::data(path, e.to_string()))?.clone();
    if headers.len() < 3 || &headers[0] != "tile_x" || &headers[1] != "tile_y" {
        return Err(Error::parse("header", "expected `tile_x,tile_y,f0,...`"));
    }
    for (i, h) in headers.iter().skip(2).enumerate() {
        if h != format!("f{i}") {
            return Err(Error::parse("header", format!("column {} should be `f{i}`, found `{h}`", i + 2)));
        }
    }
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(path, e.to_string()))?;
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(format!("row {}", line + 1), e.to_string()))?;
        coords.push([vals[0], vals[1]]);
        feats.push(vals[2..].to_vec());
    }
    if coords.is_empty() {
        return Err(Error::data(path, "no tiles"));
    }
    Ok((coords, feats))
}

/// One dataset entry. `graph_path` is relative to the manifest's directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub graph_path: PathBuf,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_hint: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_signal: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_signal: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> =
            serde_json::from_slice(&bytes).map_err(|e| Error::data(path, e.to_string()))?;
        if let Some(e) = entries.iter().find(|e| e.label > 1) {
            return Err(Error::data(path, format!("non-binary label for {}", e.graph_path.display())));
        }
        Ok(Self {
            entries,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn save(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(entries).expect("manifest serializes");
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.graph_path.is_absolute() {
            entry.graph_path.clone()
        } else {
            self.base_dir.join(&entry.graph_path)
        }
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Loads every graph; the manifest label must agree with the file.
    pub fn load_graphs(&self) -> Result<Vec<TileGraph>> {
        self.entries
            .iter()
            .map(|e| {
                let p = self.resolve(e);
                let g = load_graph(&p).map_err(|err| match err {
                    Error::Io { .. } | Error::Data { .. } => err,
                    other => Error::data(&p, other.to_string()),
                })?;
                if g.label != e.label {
                    return Err(Error::data(&p, "label disagrees with manifest"));
                }
                Ok(g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collinear() -> TileGraph {
        let coords = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        let feats = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 2.0]];
        build_graph("s0", 1, &coords, feats, 1, 8).unwrap()
    }

    #[test]
    fn pe_at_origin() {
        let pe = sinusoidal_pe([0.0, 0.0], 16).unwrap();
        let want: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        assert_eq!(pe, want);
    }

    #[test]
    fn pe_halves_swap() {
        let a = sinusoidal_pe([3.0, 7.0], 16).unwrap();
        let b = sinusoidal_pe([7.0, 3.0], 16).unwrap();
        assert_eq!(a[..8], b[8..]);
        assert_eq!(a[8..], b[..8]);
    }

    #[test]
    fn pe_first_frequency_is_one() {
        let pe = sinusoidal_pe([1.0, 0.0], 8).unwrap();
        assert!((pe[0] - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!((pe[1] - 0.540_302_305_868_139_8).abs() < 1e-15);
        assert!(sinusoidal_pe([1.0, 0.0], 6).is_err());
    }

    #[test]
    fn knn_small_cases() {
        assert!(knn_edges(&[[4.0, 4.0]], 8).is_empty());
        assert_eq!(
            knn_edges(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]], 1),
            vec![[0, 1], [1, 0], [1, 2], [2, 1]]
        );
        let coords: Vec<[f64; 2]> = (0..9).map(|i| [(i % 3) as f64, (i / 3) as f64]).collect();
        let e = knn_edges(&coords, 8);
        assert_eq!(e.len(), 9 * 8);
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        // node 0 is equidistant from 1 and 2; node 2 prefers node 3
        let e = knn_edges(&[[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.5, 0.0]], 1);
        assert_eq!(e, vec![[0, 1], [1, 0], [2, 3], [3, 2]]);
    }

    #[test]
    fn edge_feature_examples() {
        let [c, _] = edge_features(&[2.0, 5.0], &[2.0, 5.0], [0.0, 0.0], [0.0, 0.0]).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
        let [c, _] = edge_features(&[1.0, 0.0], &[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let [_, d] = edge_features(&[1.0], &[1.0], [0.0, 0.0], [3.0, 4.0]).unwrap();
        assert_eq!(d, 5.0);
        let [c, _] = edge_features(&[0.0, 0.0], &[1.0, 1.0], [0.0, 0.0], [1.0, 0.0]).unwrap();
        assert_eq!(c, 0.0);
        assert!(edge_features(&[1.0], &[1.0, 2.0], [0.0, 0.0], [0.0, 0.0]).is_err());
    }

    #[test]
    fn two_nodes_one_pair() {
        let g = build_graph("p", 0, &[[0.0, 0.0], [5.0, 5.0]], vec![vec![1.0], vec![2.0]], 8, 16).unwrap();
        assert_eq!(g.edges, vec![[0, 1], [1, 0]]);
    }

    #[test]
    fn json_round_trip_and_determinism() {
        let g = collinear();
        let bytes = g.to_json_bytes();
        assert_eq!(bytes, collinear().to_json_bytes());
        assert_eq!(TileGraph::from_json_bytes(&bytes).unwrap(), g);
    }

    #[test]
    fn out_of_range_edge_rejected() {
        let mut v: serde_json::Value = serde_json::from_slice(&collinear().to_json_bytes()).unwrap();
        v["edges"][0] = serde_json::json!([0, 3]);
        let err = TileGraph::from_json_bytes(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Parse { ref field, .. } if field == "edges"), "{err}");
    }

    #[test]
    fn missing_edge_features_rejected() {
        let mut v: serde_json::Value = serde_json::from_slice(&collinear().to_json_bytes()).unwrap();
        v.as_object_mut().unwrap().remove("edge_features");
        let err = TileGraph::from_json_bytes(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Parse { ref field, .. } if field == "edge_features"), "{err}");
    }

    #[test]
    fn asymmetric_edges_rejected() {
        let mut g = collinear();
        g.edges.remove(0);
        g.edge_features.remove(0);
        assert!(g.validate().is_err());
    }
}
