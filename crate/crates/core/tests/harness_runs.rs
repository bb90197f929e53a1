//! End-to-end training runs on small synthetic datasets.

use std::fs;
use std::path::{Path, PathBuf};

use slidemamba::harness::{evaluate_run, read_fold_assignment, run_training, train_folds, MetricsReport, TrainConfig};
use slidemamba::model::{Model, ModelConfig, ModelKind};
use slidemamba::synth::{generate, generate_graphs, SynthSpec, Task};

fn small_spec(n_graphs: usize, mu: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        n_graphs,
        nodes_min: 30,
        nodes_max: 60,
        grid_side: 12,
        d_features: 16,
        signal_strength: mu,
        seed,
        ..SynthSpec::default()
    }
}

fn small_config(manifest: PathBuf, out_dir: PathBuf, epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            d_hidden: 8,
            d_state: 4,
            ..ModelConfig::default()
        },
        epochs,
        folds: 3,
        batch_size: 4,
        manifest,
        out_dir,
        emit_fusion_trace: true,
        ..TrainConfig::default()
    }
}

fn read_report(dir: &Path) -> MetricsReport {
    serde_json::from_slice(&fs::read(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn null_dataset_has_chance_level_auc() {
    let graphs: Vec<_> = generate_graphs(&SynthSpec {
        task: Task::Mixed,
        ..small_spec(200, 0.0, 17)
    })
    .unwrap()
    .into_iter()
    .map(|g| g.graph)
    .collect();
    let config = TrainConfig {
        folds: 5,
        ..small_config(PathBuf::new(), PathBuf::new(), 4)
    };
    let auc = train_folds(&config, &graphs).unwrap().report.aggregate.roc_auc.mean;
    assert!((0.35..=0.65).contains(&auc), "null AUC {auc}");
}

#[test]
fn one_epoch_checkpoints_reproduce_logged_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&small_spec(30, 3.0, 2), &dir.path().join("data")).unwrap();
    let run = dir.path().join("run");
    run_training(&small_config(manifest, run.clone(), 1)).unwrap();
    let logged = read_report(&run);
    assert_eq!(evaluate_run(&run).unwrap(), logged);
    for fold in &logged.folds {
        let (model, adam) = Model::load(&run.join(format!("fold{}.ckpt.json", fold.fold))).unwrap();
        assert!(adam.is_some());
        assert_eq!(model.config.kind, ModelKind::Slidemamba);
        assert_eq!(model.config.d_in, 16);
    }
}

#[test]
fn run_directory_layout_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&small_spec(24, 3.0, 8), &dir.path().join("data")).unwrap();
    let run = dir.path().join("run");
    let config = small_config(manifest, run.clone(), 2);
    run_training(&config).unwrap();

    let folds = read_fold_assignment(&run.join("folds.csv")).unwrap();
    assert_eq!(folds.len(), 24);

    let curve = fs::read_to_string(run.join("loss_curve.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("fold,epoch,train_loss,val_loss,val_ap"));
    assert_eq!(lines.count(), 3 * 2);

    // One row per test slide and block; every slide is tested exactly once.
    let trace = fs::read_to_string(run.join("fusion_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("slide_id,block,h_sg,h_mamba,alpha"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_owned).collect()).collect();
    assert_eq!(rows.len(), 24 * config.model.n_blocks);
    for r in &rows {
        let alpha: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&alpha));
    }
}

#[test]
fn doubling_epochs_keeps_fold_assignment() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&small_spec(30, 3.0, 6), &dir.path().join("data")).unwrap();
    let short = dir.path().join("short");
    let long = dir.path().join("long");
    run_training(&small_config(manifest.clone(), short.clone(), 1)).unwrap();
    run_training(&small_config(manifest, long.clone(), 2)).unwrap();
    assert_eq!(
        fs::read(short.join("folds.csv")).unwrap(),
        fs::read(long.join("folds.csv")).unwrap()
    );
}

#[test]
fn data_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&small_spec(12, 3.0, 1), &dir.path().join("data")).unwrap();
    let victim = dir.path().join("data").join("graph_0003.json");
    fs::write(&victim, b"{\"slide_id\": \"x\"}").unwrap();
    let err = run_training(&small_config(manifest, dir.path().join("run"), 1)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("graph_0003.json"), "{err}");
}
