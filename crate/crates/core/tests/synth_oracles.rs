//! Closed-form detectors confirm the planted signals are learnable (and absent
//! at zero strength) before any model is trained.

use slidemamba::graph::TileGraph;
use slidemamba::harness::roc_auc;
use slidemamba::synth::{generate_graphs, SynthSpec, Task, GLOBAL_CHANNEL, LOCAL_CHANNELS};

/// Largest mean local-channel value over any tile's 8-tile neighbourhood
/// (the tile plus its 7 nearest by grid distance), i.e. the distance to the
/// motif centroid `μ·1` of the best-matching neighbourhood.
fn local_score(g: &TileGraph, m: usize) -> f64 {
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let tile_mean = |i: usize| {
        LOCAL_CHANNELS.map(|c| g.node_features[i][c]).sum::<f64>() / LOCAL_CHANNELS.len() as f64
    };
    (0..g.n_nodes)
        .map(|v| {
            let mut order: Vec<usize> = (0..g.n_nodes).collect();
            order.sort_by(|&a, &b| d2(g.coords[v], g.coords[a]).total_cmp(&d2(g.coords[v], g.coords[b])).then(a.cmp(&b)));
            order[..m].iter().map(|&i| tile_mean(i)).sum::<f64>() / m as f64
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `mean(ch4 | x > median) − mean(ch4 | x < median)`.
fn global_score(g: &TileGraph) -> f64 {
    let mut xs: Vec<f64> = g.coords.iter().map(|c| c[0]).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let median = if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) };
    let side_mean = |right: bool| {
        let vals: Vec<f64> = (0..n)
            .filter(|&i| if right { g.coords[i][0] > median } else { g.coords[i][0] < median })
            .map(|i| g.node_features[i][GLOBAL_CHANNEL])
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    side_mean(true) - side_mean(false)
}

fn oracle_auc(task: Task, mu: f64, n_graphs: usize, seed: u64) -> f64 {
    let spec = SynthSpec {
        n_graphs,
        task,
        signal_strength: mu,
        seed,
        ..SynthSpec::default()
    };
    let graphs = generate_graphs(&spec).unwrap();
    let scores: Vec<f64> = graphs
        .iter()
        .map(|s| match task {
            Task::Local => local_score(&s.graph, spec.cluster_size),
            Task::Global => global_score(&s.graph),
            Task::Mixed => unreachable!("oracles target a single signal"),
        })
        .collect();
    let labels: Vec<u8> = graphs.iter().map(|s| s.graph.label).collect();
    roc_auc(&scores, &labels).unwrap()
}

#[test]
fn local_oracle_separates_at_mu_5() {
    for seed in [11, 12, 13] {
        let auc = oracle_auc(Task::Local, 5.0, 100, seed);
        assert!(auc > 0.95, "seed {seed}: local oracle AUC {auc}");
    }
}

#[test]
fn global_oracle_separates_at_mu_5() {
    for seed in [21, 22, 23] {
        let auc = oracle_auc(Task::Global, 5.0, 100, seed);
        assert!(auc > 0.95, "seed {seed}: global oracle AUC {auc}");
    }
}

#[test]
fn oracles_see_nothing_at_mu_0() {
    for (task, seed) in [(Task::Local, 31), (Task::Global, 32)] {
        let auc = oracle_auc(task, 0.0, 200, seed);
        assert!((0.35..=0.65).contains(&auc), "{task}: null AUC {auc}");
    }
}

#[test]
fn mixed_labels_match_planted_signals() {
    let spec = SynthSpec {
        n_graphs: 60,
        task: Task::Mixed,
        seed: 4,
        ..SynthSpec::default()
    };
    let graphs = generate_graphs(&spec).unwrap();
    for s in &graphs {
        assert_eq!(s.graph.label == 1, s.local_signal || s.global_signal, "{}", s.graph.slide_id);
    }
    let local_only = graphs.iter().filter(|s| s.local_signal && !s.global_signal).count();
    let global_only = graphs.iter().filter(|s| s.global_signal && !s.local_signal).count();
    assert!(local_only > 0 && global_only > 0);
    // The local detector fires on local positives and not on global-only ones.
    let mean_local = |pick: &dyn Fn(&&slidemamba::synth::SynthGraph) -> bool| {
        let v: Vec<f64> = graphs.iter().filter(pick).map(|s| local_score(&s.graph, spec.cluster_size)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean_local(&|s| s.local_signal) > mean_local(&|s| !s.local_signal) + 1.0);
}
