//! Planted-signal tile graphs.
//!
//! Base features are i.i.d. standard normal. A LOCAL signal shifts channels
//! 0..4 of one spatially compact cluster of `m` tiles by `+μ`; a GLOBAL
//! signal shifts channel 4 by `μ·sign(x − median_x)` across the whole slide.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::derive_seed;
use crate::error::{Error, Result};
use crate::graph::{build_graph, save_graph, Manifest, ManifestEntry, TileGraph, DEFAULT_K, DEFAULT_PE_DIM};

/// Channels carrying the local motif.
pub const LOCAL_CHANNELS: std::ops::Range<usize> = 0..4;
/// Channel carrying the slide-wide gradient.
pub const GLOBAL_CHANNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Local,
    Global,
    Mixed,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Local => "local",
            Task::Global => "global",
            Task::Mixed => "mixed",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Task::Local),
            "global" => Ok(Task::Global),
            "mixed" => Ok(Task::Mixed),
            _ => Err(Error::config(format!("unknown task `{s}` (local, global, mixed)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_graphs: usize,
    pub nodes_min: usize,
    pub nodes_max: usize,
    pub grid_side: usize,
    pub d_features: usize,
    pub task: Task,
    /// Shift magnitude `μ`.
    pub signal_strength: f64,
    /// Tiles in the local motif.
    pub cluster_size: usize,
    pub positive_fraction: f64,
    pub seed: u64,
    pub k: usize,
    pub pe_dim: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_graphs: 100,
            nodes_min: 100,
            nodes_max: 300,
            grid_side: 24,
            d_features: 64,
            task: Task::Mixed,
            signal_strength: 3.0,
            cluster_size: 8,
            positive_fraction: 0.5,
            seed: 0,
            k: DEFAULT_K,
            pe_dim: DEFAULT_PE_DIM,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.n_graphs == 0 {
            return fail("synth.n_graphs must be positive".into());
        }
        if self.nodes_min == 0 || self.nodes_min > self.nodes_max {
            return fail(format!(
                "synth node range {}..={} is empty",
                self.nodes_min, self.nodes_max
            ));
        }
        if self.nodes_max > self.grid_side * self.grid_side {
            return fail(format!(
                "synth.nodes_max {} exceeds the {}x{} grid",
                self.nodes_max, self.grid_side, self.grid_side
            ));
        }
        if self.cluster_size == 0 || self.cluster_size > self.nodes_min {
            return fail(format!(
                "synth.cluster_size must be in 1..={}, got {}",
                self.nodes_min, self.cluster_size
            ));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return fail(format!(
                "synth.positive_fraction must be in (0, 1), got {}",
                self.positive_fraction
            ));
        }
        if self.d_features <= GLOBAL_CHANNEL {
            return fail(format!("synth.d_features must be at least {}", GLOBAL_CHANNEL + 1));
        }
        if !(self.signal_strength.is_finite() && self.signal_strength >= 0.0) {
            return fail("synth.signal_strength must be finite and non-negative".into());
        }
        if self.k == 0 {
            return fail("synth.k must be positive".into());
        }
        if self.pe_dim % 4 != 0 {
            return fail(format!("synth.pe_dim must be a multiple of 4, got {}", self.pe_dim));
        }
        Ok(())
    }

    pub fn n_positive(&self) -> usize {
        (self.n_graphs as f64 * self.positive_fraction).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthGraph {
    pub graph: TileGraph,
    pub local_signal: bool,
    pub global_signal: bool,
}

/// The node itself plus its `m − 1` nearest nodes by grid distance, ties to
/// the lower index.
fn cluster_around(coords: &[[f64; 2]], center: usize, m: usize) -> Vec<usize> {
    let c = coords[center];
    let mut idx: Vec<usize> = (0..coords.len()).collect();
    let d2 = |i: usize| (coords[i][0] - c[0]).powi(2) + (coords[i][1] - c[1]).powi(2);
    idx.sort_by(|&a, &b| d2(a).total_cmp(&d2(b)).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn generate_one(spec: &SynthSpec, index: usize, label: u8) -> Result<SynthGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("graph{index}")));
    let n = rng.random_range(spec.nodes_min..=spec.nodes_max);
    let side = spec.grid_side;
    let mut cells = sample(&mut rng, side * side, n).into_vec();
    cells.sort_unstable();
    let coords: Vec<[f64; 2]> = cells.iter().map(|&c| [(c % side) as f64, (c / side) as f64]).collect();
    let mut feats: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..spec.d_features).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let (local, global) = match (label, spec.task) {
        (0, _) => (false, false),
        (_, Task::Local) => (true, false),
        (_, Task::Global) => (false, true),
        (_, Task::Mixed) => loop {
            let (l, g) = (rng.random_bool(0.5), rng.random_bool(0.5));
            if l || g {
                break (l, g);
            }
        },
    };
    let mu = spec.signal_strength;
    if local {
        let center = rng.random_range(0..n);
        for i in cluster_around(&coords, center, spec.cluster_size) {
            for c in LOCAL_CHANNELS {
                feats[i][c] += mu;
            }
        }
    }
    if global {
        let mx = median(coords.iter().map(|c| c[0]).collect());
        for (i, c) in coords.iter().enumerate() {
            let s = c[0] - mx;
            if s != 0.0 {
                feats[i][GLOBAL_CHANNEL] += mu * s.signum();
            }
        }
    }
    let graph = build_graph(&format!("synth_{index:04}"), label, &coords, feats, spec.k, spec.pe_dim)?;
    Ok(SynthGraph {
        graph,
        local_signal: local,
        global_signal: global,
    })
}

/// A signal-free graph of `n_nodes` tiles scattered over a square grid with
/// twice as many cells, for gradient checks and smoke tests.
pub fn random_graph(n_nodes: usize, d_features: usize, pe_dim: usize, seed: u64, label: u8) -> Result<TileGraph> {
    if n_nodes == 0 || d_features == 0 {
        return Err(Error::config("random graph needs at least one node and one feature"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = ((2 * n_nodes) as f64).sqrt().ceil() as usize;
    let mut cells = sample(&mut rng, side * side, n_nodes).into_vec();
    cells.sort_unstable();
    let coords: Vec<[f64; 2]> = cells.iter().map(|&c| [(c % side) as f64, (c / side) as f64]).collect();
    let feats = (0..n_nodes)
        .map(|_| (0..d_features).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let k = DEFAULT_K.min(n_nodes.saturating_sub(1)).max(1);
    build_graph(&format!("random_{seed}"), label, &coords, feats, k, pe_dim)
}

/// Labels with exactly `⌊n·positive_fraction⌋` positives in seeded order.
fn assign_labels(spec: &SynthSpec) -> Vec<u8> {
    let n_pos = spec.n_positive();
    let mut labels: Vec<u8> = (0..spec.n_graphs).map(|i| u8::from(i < n_pos)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "labels"));
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    labels
}

/// Builds every graph in memory. Graphs are generated in parallel from
/// per-graph seeds, so the result does not depend on thread count.
pub fn generate_graphs(spec: &SynthSpec) -> Result<Vec<SynthGraph>> {
    spec.validate()?;
    let labels = assign_labels(spec);
    labels
        .par_iter()
        .enumerate()
        .map(|(i, &y)| generate_one(spec, i, y))
        .collect()
}

/// Writes `graph_NNNN.json` files and `manifest.json` into `out_dir` and
/// returns the manifest path.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    let graphs = generate_graphs(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = graphs
        .par_iter()
        .enumerate()
        .map(|(i, sg)| {
            let name = format!("graph_{i:04}.json");
            save_graph(&out_dir.join(&name), &sg.graph)?;
            Ok(ManifestEntry {
                graph_path: PathBuf::from(name),
                label: sg.graph.label,
                fold_hint: None,
                local_signal: Some(sg.local_signal),
                global_signal: Some(sg.global_signal),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = out_dir.join("manifest.json");
    Manifest::save(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task) -> SynthSpec {
        SynthSpec {
            n_graphs: 12,
            nodes_min: 20,
            nodes_max: 40,
            grid_side: 10,
            d_features: 8,
            task,
            seed: 9,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn class_balance_and_bookkeeping() {
        for task in [Task::Local, Task::Global, Task::Mixed] {
            let spec = SynthSpec {
                positive_fraction: 0.3,
                ..small(task)
            };
            let gs = generate_graphs(&spec).unwrap();
            let pos = gs.iter().filter(|g| g.graph.label == 1).count();
            assert_eq!(pos, 3);
            for g in &gs {
                assert_eq!(g.graph.label == 1, g.local_signal || g.global_signal);
                match task {
                    Task::Local => assert!(!g.global_signal),
                    Task::Global => assert!(!g.local_signal),
                    Task::Mixed => {}
                }
                assert!((20..=40).contains(&g.graph.n_nodes));
                g.graph.validate().unwrap();
            }
        }
    }

    #[test]
    fn coordinates_are_distinct_grid_cells() {
        for g in generate_graphs(&small(Task::Mixed)).unwrap() {
            let mut cells: Vec<(i64, i64)> = g.graph.coords.iter().map(|c| (c[0] as i64, c[1] as i64)).collect();
            cells.sort_unstable();
            cells.dedup();
            assert_eq!(cells.len(), g.graph.n_nodes);
            assert!(cells.iter().all(|&(x, y)| (0..10).contains(&x) && (0..10).contains(&y)));
        }
    }

    #[test]
    fn zero_strength_makes_labels_uninformative() {
        // same per-graph streams, different label assignments: with μ = 0
        // every graph's features come out identical either way
        let a = SynthSpec {
            signal_strength: 0.0,
            positive_fraction: 0.25,
            ..small(Task::Local)
        };
        let b = SynthSpec {
            positive_fraction: 0.75,
            ..a.clone()
        };
        let ga = generate_graphs(&a).unwrap();
        let gb = generate_graphs(&b).unwrap();
        assert!(ga.iter().zip(&gb).any(|(x, y)| x.graph.label != y.graph.label));
        for (x, y) in ga.iter().zip(&gb) {
            assert_eq!(x.graph.node_features, y.graph.node_features);
        }
    }

    #[test]
    fn local_cluster_is_contiguous() {
        let coords: Vec<[f64; 2]> = (0..25).map(|i| [(i % 5) as f64, (i / 5) as f64]).collect();
        let c = cluster_around(&coords, 12, 5);
        assert_eq!(c, vec![12, 7, 11, 13, 17]);
    }

    #[test]
    fn spec_validation() {
        let bad = [
            SynthSpec { nodes_min: 50, nodes_max: 40, ..small(Task::Local) },
            SynthSpec { nodes_max: 101, ..small(Task::Local) },
            SynthSpec { cluster_size: 30, ..small(Task::Local) },
            SynthSpec { positive_fraction: 1.0, ..small(Task::Local) },
            SynthSpec { d_features: 4, ..small(Task::Local) },
        ];
        for s in bad {
            assert!(matches!(generate_graphs(&s), Err(Error::Config(_))), "{s:?}");
        }
    }

    #[test]
    fn files_are_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = small(Task::Mixed);
        generate(&spec, a.path()).unwrap();
        generate(&spec, b.path()).unwrap();
        for i in 0..spec.n_graphs {
            let name = format!("graph_{i:04}.json");
            assert_eq!(
                std::fs::read(a.path().join(&name)).unwrap(),
                std::fs::read(b.path().join(&name)).unwrap()
            );
        }
        let m = Manifest::load(&a.path().join("manifest.json")).unwrap();
        assert_eq!(m.entries.len(), spec.n_graphs);
        assert_eq!(m.load_graphs().unwrap().len(), spec.n_graphs);
    }
}
