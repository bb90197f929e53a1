//! Cross-validated training, evaluation and metrics.

mod config;
pub mod metrics;
pub mod split;
mod train;

pub use config::TrainConfig;
pub use metrics::{average_precision, roc_auc, sens_spec, FoldMetrics, MetricsReport, Summary};
pub use split::{stratified_kfold, train_val_split};
pub use train::{
    checkpoint_path, evaluate_run, predict, read_fold_assignment, run_training, train_folds, write_outputs, EpochLog, FoldOutcome,
    Prediction, TraceRow, TrainOutcome, RUN_CONFIG_FILE,
};
