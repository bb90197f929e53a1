//! `slidemamba` command-line driver.
//!
//! Settings come from built-in defaults, then an optional TOML file with
//! `[synth]`, `[model]` and `[train]` tables, then command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{DeserializeOwned, IntoDeserializer};
use serde::Deserialize;

use slidemamba::diffcore::FdOptions;
use slidemamba::graph::{build_graph, load_graph, read_feature_csv, save_graph, Manifest, DEFAULT_K, DEFAULT_PE_DIM};
use slidemamba::harness::{evaluate_run, predict, run_training, FoldMetrics, MetricsReport, TrainConfig};
use slidemamba::model::{GraphBatch, Model, ModelConfig, ModelKind};
use slidemamba::ssm::{parallel_scan_lanes, sequential_scan_lanes};
use slidemamba::synth::{generate, random_graph, SynthSpec};
use slidemamba::{Error, Result};

#[derive(Parser)]
#[command(name = "slidemamba", version, about = "Dual-branch GIN + selective SSM over tile graphs")]
struct Cli {
    /// TOML file with optional [synth], [model] and [train] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-signal dataset (graph files and manifest).
    Synth {
        #[command(flatten)]
        spec: SynthArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a graph file from a tile feature CSV, or validate a graph JSON.
    BuildGraph(BuildGraphArgs),
    /// Cross-validated training; writes metrics, splits, curves and checkpoints.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Recompute test metrics from a run directory or a single checkpoint.
    Eval(EvalArgs),
    /// Finite-difference gradient check of a model on a random graph.
    Gradcheck(GradcheckArgs),
    /// Time the sequential and parallel scans against each other.
    Benchscan(BenchscanArgs),
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    T::deserialize(s.into_deserializer()).map_err(|e: serde::de::value::Error| e.to_string())
}

/// Copies every flag that was given onto the matching config field.
macro_rules! override_fields {
    ($args:expr, $target:expr; $($field:ident),* $(,)?) => {
        $(if let Some(v) = $args.$field.clone() {
            $target.$field = v;
        })*
    };
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n_graphs: Option<usize>,
    #[arg(long)]
    nodes_min: Option<usize>,
    #[arg(long)]
    nodes_max: Option<usize>,
    #[arg(long)]
    grid_side: Option<usize>,
    #[arg(long)]
    d_features: Option<usize>,
    /// local, global or mixed.
    #[arg(long, value_parser = parse_enum::<slidemamba::synth::Task>)]
    task: Option<slidemamba::synth::Task>,
    /// Signal shift μ.
    #[arg(long)]
    signal_strength: Option<f64>,
    #[arg(long)]
    cluster_size: Option<usize>,
    #[arg(long)]
    positive_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Neighbours per tile.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    pe_dim: Option<usize>,
}

impl SynthArgs {
    fn apply(&self, spec: &mut SynthSpec) {
        override_fields!(self, spec; n_graphs, nodes_min, nodes_max, grid_side, d_features, task,
            signal_strength, cluster_size, positive_fraction, seed, k, pe_dim);
    }
}

#[derive(Args)]
struct ModelArgs {
    /// slidemamba, gnn_only, mamba_only, fixed_sum_hybrid or mil_meanpool.
    #[arg(long, value_parser = parse_enum::<ModelKind>)]
    kind: Option<ModelKind>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    n_blocks: Option<usize>,
    #[arg(long)]
    d_state: Option<usize>,
    #[arg(long = "model-pe-dim", id = "model_pe_dim", value_name = "MODEL_PE_DIM")]
    pe_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    fixed_alpha: Option<f64>,
    /// Parameter initialization seed.
    #[arg(long = "model-seed", id = "model_seed", value_name = "MODEL_SEED")]
    seed: Option<u64>,
    /// sequential or parallel.
    #[arg(long, value_parser = parse_enum::<slidemamba::ssm::ScanKind>)]
    scan: Option<slidemamba::ssm::ScanKind>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    grad_through_alpha: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    gin_message_relu: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    attention_pool: Option<bool>,
    /// features or aux_head.
    #[arg(long, value_parser = parse_enum::<slidemamba::fusion::ConfidenceSource>)]
    confidence_source: Option<slidemamba::fusion::ConfidenceSource>,
    #[arg(long)]
    aux_loss_weight: Option<f64>,
}

impl ModelArgs {
    fn apply(&self, cfg: &mut ModelConfig) {
        override_fields!(self, cfg; kind, d_in, d_hidden, n_blocks, d_state, pe_dim, dropout, fixed_alpha,
            seed, scan, grad_through_alpha, gin_message_relu, attention_pool, confidence_source,
            aux_loss_weight);
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Graphs per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Write fusion_trace.csv with per-slide, per-block mixing weights.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    emit_fusion_trace: Option<bool>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut TrainConfig) {
        override_fields!(self, cfg; lr, epochs, batch_size, folds, early_stop_patience, train_fraction, seed,
            manifest, out_dir, emit_fusion_trace, eval_batch_size);
    }
}

#[derive(Args)]
struct BuildGraphArgs {
    /// Tile feature CSV (`tile_x,tile_y,f0,...`) or graph JSON.
    #[arg(long)]
    input: PathBuf,
    /// Output graph JSON.
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the input file stem.
    #[arg(long)]
    slide_id: Option<String>,
    /// Slide label, required for CSV input.
    #[arg(long)]
    label: Option<u8>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_PE_DIM)]
    pe_dim: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long, conflicts_with_all = ["checkpoint"], required_unless_present = "checkpoint")]
    run_dir: Option<PathBuf>,
    /// A single checkpoint, evaluated on every graph of `--manifest`.
    #[arg(long, requires = "manifest")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Check every model kind instead of `--kind` only.
    #[arg(long)]
    all_kinds: bool,
    #[arg(long, default_value_t = 12)]
    nodes: usize,
    #[arg(long, default_value_t = 5)]
    features: usize,
    /// Seed of the random test graph. Central differences are unreliable when a
    /// ReLU input sits within `--step` of zero; try another seed if one
    /// coordinate fails far above the rest.
    #[arg(long, default_value_t = 1)]
    graph_seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct BenchscanArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,37,256,1024,4096")]
    t: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    s: usize,
    /// Timed repetitions; the median is reported.
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    synth: SynthSpec,
    model: ModelConfig,
    train: toml::Table,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if cfg.train.contains_key("model") {
            return Err(Error::config("model settings belong in the top-level [model] table"));
        }
        Ok(cfg)
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = toml::Value::Table(self.train.clone())
            .try_into()
            .map_err(|e| Error::config(format!("[train]: {e}")))?;
        cfg.model = self.model.clone();
        Ok(cfg)
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn report_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

fn cmd_synth(file: &FileConfig, args: &SynthArgs, out: &Path) -> Result<()> {
    let mut spec = file.synth.clone();
    args.apply(&mut spec);
    let manifest = generate(&spec, out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_build_graph(args: &BuildGraphArgs) -> Result<()> {
    let is_json = args.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let graph = if is_json {
        let mut g = load_graph(&args.input)?;
        if let Some(id) = &args.slide_id {
            g.slide_id = id.clone();
        }
        g
    } else {
        let label = args
            .label
            .ok_or_else(|| Error::config("--label is required when building from a feature CSV"))?;
        let slide_id = match &args.slide_id {
            Some(id) => id.clone(),
            None => args
                .input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        let (coords, feats) = read_feature_csv(&args.input)?;
        build_graph(&slide_id, label, &coords, feats, args.k, args.pe_dim)?
    };
    save_graph(&args.out, &graph)?;
    println!(
        "{}: {} nodes, {} edges",
        args.out.display(),
        graph.n_nodes,
        graph.edges.len()
    );
    Ok(())
}

fn cmd_train(file: &FileConfig, model: &ModelArgs, train: &TrainArgs) -> Result<()> {
    let mut cfg = file.train_config()?;
    train.apply(&mut cfg);
    model.apply(&mut cfg.model);
    let outcome = run_training(&cfg)?;
    let agg = &outcome.report.aggregate;
    println!(
        "{}: AP {:.4} ± {:.4}, ROC AUC {:.4} ± {:.4} over {} folds -> {}",
        outcome.report.model_kind,
        agg.average_precision.mean,
        agg.average_precision.sd,
        agg.roc_auc.mean,
        agg.roc_auc.sd,
        agg.roc_auc.n,
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let report = match (&args.run_dir, &args.checkpoint, &args.manifest) {
        (Some(dir), _, _) => evaluate_run(dir)?,
        (None, Some(ckpt), Some(manifest)) => {
            let (model, _) = Model::load(ckpt)?;
            let graphs = Manifest::load(manifest)?.load_graphs()?;
            let idx: Vec<usize> = (0..graphs.len()).collect();
            let pred = predict(&model, &graphs, &idx, 16)?;
            let labels: Vec<u8> = graphs.iter().map(|g| g.label).collect();
            let m = FoldMetrics::from_predictions(0, &pred.probs(), &labels)?;
            MetricsReport::new(model.config.kind.to_string(), vec![m])?
        }
        _ => return Err(Error::config("eval needs --run-dir, or --checkpoint with --manifest")),
    };
    let text = report_json(&report);
    if let Some(out) = &args.out {
        fs::write(out, &text).map_err(|e| Error::io(out, e))?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_gradcheck(file: &FileConfig, args: &GradcheckArgs) -> Result<()> {
    let mut base = file.model.clone();
    args.model.apply(&mut base);
    base.d_in = args.features;
    let graph = random_graph(args.nodes, args.features, base.pe_dim, args.graph_seed, 1)?;
    let batch = GraphBatch::new(&[&graph])?;
    let kinds = if args.all_kinds { ModelKind::ALL.to_vec() } else { vec![base.kind] };
    let opts = FdOptions {
        h: args.step,
        samples_per_param: args.samples,
        seed: args.graph_seed,
    };
    let mut worst = 0.0_f64;
    println!("kind,max_rel_error,worst_param,coordinates");
    for kind in kinds {
        let mut model = Model::new(ModelConfig { kind, ..base.clone() })?;
        model.warm_running_stats(&batch, 10, args.graph_seed)?;
        let rep = model.gradient_check(&batch, opts)?;
        println!(
            "{kind},{:.3e},{}[{}],{}",
            rep.max_rel_error, rep.worst_param, rep.worst_index, rep.coordinates_checked
        );
        worst = worst.max(rep.max_rel_error);
    }
    if worst < args.tolerance {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "max relative error {worst:.3e} exceeds {:.1e}",
            args.tolerance
        )))
    }
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

fn cmd_benchscan(args: &BenchscanArgs) -> Result<()> {
    if args.reps == 0 || args.d == 0 || args.s == 0 {
        return Err(Error::config("benchscan needs positive --reps, --d and --s"));
    }
    let lanes = args.d * args.s;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut csv = String::from("T,d,S,seq_ms,par_ms,max_abs_diff\n");
    for &t in &args.t {
        let a: Vec<f64> = (0..t * lanes).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..t * lanes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut seq_times = Vec::with_capacity(args.reps);
        let mut par_times = Vec::with_capacity(args.reps);
        let mut diff = 0.0_f64;
        for _ in 0..args.reps {
            let start = Instant::now();
            let hs = sequential_scan_lanes(&a, &b, lanes);
            seq_times.push(start.elapsed().as_secs_f64() * 1e3);
            let start = Instant::now();
            let hp = parallel_scan_lanes(&a, &b, lanes);
            par_times.push(start.elapsed().as_secs_f64() * 1e3);
            diff = hs.iter().zip(&hp).map(|(x, y)| (x - y).abs()).fold(diff, f64::max);
        }
        writeln!(
            csv,
            "{t},{},{},{:.6},{:.6},{diff:e}",
            args.d,
            args.s,
            median_ms(seq_times),
            median_ms(par_times)
        )
        .expect("writing to a String");
    }
    write_or_print(args.out.as_deref(), &csv)
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth { spec, out } => cmd_synth(&file, spec, out),
        Command::BuildGraph(args) => cmd_build_graph(args),
        Command::Train { model, train } => cmd_train(&file, model, train),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(&file, args),
        Command::Benchscan(args) => cmd_benchscan(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
