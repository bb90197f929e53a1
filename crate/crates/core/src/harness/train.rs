use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::{average_precision, FoldMetrics, MetricsReport};
use super::split::{stratified_kfold, train_val_split};
use crate::diffcore::nn::Ctx;
use crate::diffcore::{adam_step, derive_seed, sigmoid, AdamState, Tape};
use crate::error::{Error, Result};
use crate::fusion::FusionTrace;
use crate::graph::{Manifest, TileGraph};
use crate::model::{GraphBatch, Model};

/// Name of the run description written next to the outputs.
pub const RUN_CONFIG_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub slide_id: String,
    pub block: usize,
    pub h_sg: f64,
    pub h_mamba: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub metrics: FoldMetrics,
    pub log: Vec<EpochLog>,
    pub traces: Vec<TraceRow>,
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub adam: AdamState,
    pub test: Vec<usize>,
    pub test_probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: MetricsReport,
    /// Test fold of every graph.
    pub fold_of: Vec<usize>,
    pub folds: Vec<FoldOutcome>,
}

/// Eval-mode predictions for a list of graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    /// `traces[i][block]` for graph `i`.
    pub traces: Vec<Vec<FusionTrace>>,
}

impl Prediction {
    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }
}

/// Runs the model in eval mode over `idx`, `batch` graphs at a time.
pub fn predict(model: &Model, graphs: &[TileGraph], idx: &[usize], batch: usize) -> Result<Prediction> {
    let mut logits = Vec::with_capacity(idx.len());
    let mut traces = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch.max(1)) {
        let refs: Vec<&TileGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
        let (z, t) = model.predict(&GraphBatch::new(&refs)?)?;
        logits.extend(z);
        for g in 0..chunk.len() {
            traces.push(t.iter().map(|block| block[g]).collect());
        }
    }
    Ok(Prediction { logits, traces })
}

fn labels_of(graphs: &[TileGraph], idx: &[usize]) -> Vec<u8> {
    idx.iter().map(|&i| graphs[i].label).collect()
}

fn mean_bce(pred: &Prediction, labels: &[u8]) -> f64 {
    let n = labels.len().max(1) as f64;
    pred.logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| crate::model::bce_loss(z, f64::from(y)))
        .sum::<f64>()
        / n
}

fn with_context(err: Error, ctx: &str) -> Error {
    match err {
        Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
        other => other,
    }
}

fn train_fold(config: &TrainConfig, graphs: &[TileGraph], fold_of: &[usize], fold: usize) -> Result<FoldOutcome> {
    let labels: Vec<u8> = graphs.iter().map(|g| g.label).collect();
    let test: Vec<usize> = (0..graphs.len()).filter(|&i| fold_of[i] == fold).collect();
    let pool: Vec<usize> = (0..graphs.len()).filter(|&i| fold_of[i] != fold).collect();
    let (train, val) = train_val_split(
        &pool,
        &labels,
        config.train_fraction,
        derive_seed(config.seed, &format!("fold{fold}")),
    );
    let val_labels = labels_of(graphs, &val);

    let mut model = Model::new(config.model.clone())?;
    let mut adam = AdamState::new(config.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("fold{fold}/shuffle")));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("fold{fold}/dropout")));

    let mut best: Option<(f64, usize, Model, AdamState)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut order = train.clone();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&TileGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
            let batch = GraphBatch::new(&refs)?;
            let ctx_msg = format!("fold {fold}, epoch {epoch}, step {step}");
            let mut tape = Tape::new();
            let mut ctx = Ctx::train(&mut dropout_rng);
            let out = model.forward(&mut tape, &model.store, &batch, None, &mut ctx)?;
            let loss = model.loss(&mut tape, &out, &batch)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("{ctx_msg}: loss is {value}")));
            }
            loss_sum += value * chunk.len() as f64;
            model.store.zero_grad();
            tape.backward(loss, &mut model.store).map_err(|e| with_context(e, &ctx_msg))?;
            adam_step(&mut model.store, &mut adam).map_err(|e| with_context(e, &ctx_msg))?;
            ctx.apply_bn_updates(&mut model.store);
        }
        let pred = predict(&model, graphs, &val, config.eval_batch_size)?;
        let val_ap = average_precision(&pred.probs(), &val_labels)?;
        log.push(EpochLog {
            fold,
            epoch,
            train_loss: loss_sum / train.len().max(1) as f64,
            val_loss: mean_bce(&pred, &val_labels),
            val_ap,
        });
        if best.as_ref().is_none_or(|b| val_ap > b.0) {
            best = Some((val_ap, epoch, model.clone(), adam.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                break;
            }
        }
    }
    let epochs_run = log.len();
    let (_, best_epoch, model, adam) = best.expect("at least one epoch ran");
    let pred = predict(&model, graphs, &test, config.eval_batch_size)?;
    let test_probs = pred.probs();
    let mut metrics = FoldMetrics::from_predictions(fold, &test_probs, &labels_of(graphs, &test))?;
    metrics.n_train = train.len();
    metrics.n_val = val.len();
    metrics.best_epoch = best_epoch;
    metrics.epochs_run = epochs_run;
    let traces = test
        .iter()
        .zip(&pred.traces)
        .flat_map(|(&i, per_block)| {
            per_block.iter().map(move |t| TraceRow {
                slide_id: graphs[i].slide_id.clone(),
                block: t.block_index,
                h_sg: t.h_sg,
                h_mamba: t.h_mamba,
                alpha: t.alpha,
            })
        })
        .collect();
    Ok(FoldOutcome {
        metrics,
        log,
        traces,
        model,
        adam,
        test,
        test_probs,
    })
}

fn check_data(config: &TrainConfig, graphs: &[TileGraph]) -> Result<TrainConfig> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::data(&config.manifest, "manifest lists no graphs"))?;
    let mut config = config.clone();
    config.model.d_in = first.feature_dim();
    for g in graphs {
        if g.feature_dim() != first.feature_dim() {
            return Err(Error::data(
                &config.manifest,
                format!("graph `{}` has {} features, expected {}", g.slide_id, g.feature_dim(), first.feature_dim()),
            ));
        }
        if g.pe_dim() != config.model.pe_dim {
            return Err(Error::data(
                &config.manifest,
                format!(
                    "graph `{}` has {} PE columns, model.pe_dim is {}",
                    g.slide_id,
                    g.pe_dim(),
                    config.model.pe_dim
                ),
            ));
        }
    }
    config.validate()?;
    Ok(config)
}

/// Trains one model per fold (folds run in parallel) and collects test
/// metrics. Results do not depend on the thread count.
pub fn train_folds(config: &TrainConfig, graphs: &[TileGraph]) -> Result<TrainOutcome> {
    config.validate()?;
    let config = check_data(config, graphs)?;
    let labels: Vec<u8> = graphs.iter().map(|g| g.label).collect();
    let fold_of = stratified_kfold(&labels, config.folds, config.seed)?;
    let folds = (0..config.folds)
        .into_par_iter()
        .map(|f| train_fold(&config, graphs, &fold_of, f))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::new(
        config.model.kind.to_string(),
        folds.iter().map(|f| f.metrics.clone()).collect(),
    )?;
    Ok(TrainOutcome { report, fold_of, folds })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::data(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::data(path, e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct FoldRow {
    index: usize,
    slide_id: String,
    label: u8,
    fold: usize,
}

pub fn checkpoint_path(out_dir: &Path, fold: usize) -> PathBuf {
    out_dir.join(format!("fold{fold}.ckpt.json"))
}

/// Writes `metrics.json`, `folds.csv`, `loss_curve.csv`, one checkpoint per
/// fold, the run description and, when enabled, `fusion_trace.csv`.
pub fn write_outputs(config: &TrainConfig, graphs: &[TileGraph], outcome: &TrainOutcome) -> Result<()> {
    let dir = &config.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("metrics.json"), &outcome.report)?;
    write_json(&dir.join(RUN_CONFIG_FILE), config)?;
    let rows: Vec<FoldRow> = graphs
        .iter()
        .enumerate()
        .map(|(i, g)| FoldRow {
            index: i,
            slide_id: g.slide_id.clone(),
            label: g.label,
            fold: outcome.fold_of[i],
        })
        .collect();
    write_csv(&dir.join("folds.csv"), &rows)?;
    let log: Vec<&EpochLog> = outcome.folds.iter().flat_map(|f| &f.log).collect();
    write_csv(&dir.join("loss_curve.csv"), &log)?;
    if config.emit_fusion_trace {
        let traces: Vec<&TraceRow> = outcome.folds.iter().flat_map(|f| &f.traces).collect();
        let path = dir.join("fusion_trace.csv");
        if traces.is_empty() {
            fs::write(&path, "slide_id,block,h_sg,h_mamba,alpha\n").map_err(|e| Error::io(&path, e))?;
        } else {
            write_csv(&path, &traces)?;
        }
    }
    for f in &outcome.folds {
        f.model.save(&checkpoint_path(dir, f.metrics.fold), Some(&f.adam))?;
    }
    Ok(())
}

/// Loads the manifest, trains every fold and writes the outputs.
pub fn run_training(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let graphs = Manifest::load(&config.manifest)?.load_graphs()?;
    let mut config = config.clone();
    config.manifest = fs::canonicalize(&config.manifest).map_err(|e| Error::io(&config.manifest, e))?;
    let outcome = train_folds(&config, &graphs)?;
    config.model.d_in = graphs[0].feature_dim();
    write_outputs(&config, &graphs, &outcome)?;
    Ok(outcome)
}

/// Test-fold assignment recorded in `folds.csv`.
pub fn read_fold_assignment(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<FoldRow>().enumerate() {
        let row = row.map_err(|e| Error::data(path, e.to_string()))?;
        if row.index != i {
            return Err(Error::data(path, format!("row {i} has index {}", row.index)));
        }
        out.push(row.fold);
    }
    Ok(out)
}

/// Re-evaluates every fold checkpoint of a finished run on its test split.
/// Bookkeeping fields (split sizes, epochs) are carried over from the logged
/// `metrics.json`; the metric values are recomputed.
pub fn evaluate_run(run_dir: &Path) -> Result<MetricsReport> {
    let cfg_path = run_dir.join(RUN_CONFIG_FILE);
    let bytes = fs::read(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config: TrainConfig = serde_json::from_slice(&bytes).map_err(|e| Error::data(&cfg_path, e.to_string()))?;
    let metrics_path = run_dir.join("metrics.json");
    let bytes = fs::read(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let logged: MetricsReport =
        serde_json::from_slice(&bytes).map_err(|e| Error::data(&metrics_path, e.to_string()))?;
    let graphs = Manifest::load(&config.manifest)?.load_graphs()?;
    let fold_of = read_fold_assignment(&run_dir.join("folds.csv"))?;
    if fold_of.len() != graphs.len() {
        return Err(Error::data(
            run_dir.join("folds.csv"),
            format!("{} rows for {} graphs", fold_of.len(), graphs.len()),
        ));
    }
    let folds = logged
        .folds
        .iter()
        .map(|logged_fold| {
            let f = logged_fold.fold;
            let (model, _) = Model::load(&checkpoint_path(run_dir, f))?;
            let test: Vec<usize> = (0..graphs.len()).filter(|&i| fold_of[i] == f).collect();
            let pred = predict(&model, &graphs, &test, config.eval_batch_size)?;
            let mut m = FoldMetrics::from_predictions(f, &pred.probs(), &labels_of(&graphs, &test))?;
            m.n_train = logged_fold.n_train;
            m.n_val = logged_fold.n_val;
            m.best_epoch = logged_fold.best_epoch;
            m.epochs_run = logged_fold.epochs_run;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::new(logged.model_kind, folds)
}
