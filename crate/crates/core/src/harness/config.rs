use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Cross-validated training run. `model.d_in` is taken from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    /// Graphs per optimizer step.
    pub batch_size: usize,
    pub folds: usize,
    pub early_stop_patience: usize,
    /// Share of each fold's non-test graphs used for training; the rest
    /// drives early stopping.
    pub train_fraction: f64,
    pub seed: u64,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub emit_fusion_trace: bool,
    /// Graphs per forward pass at evaluation time.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-3,
            epochs: 50,
            batch_size: 8,
            folds: 5,
            early_stop_patience: 10,
            train_fraction: 0.7,
            seed: 0,
            manifest: PathBuf::from("manifest.json"),
            out_dir: PathBuf::from("run"),
            emit_fusion_trace: false,
            eval_batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return fail("train.epochs must be at least 1".into());
        }
        if self.folds < 2 {
            return fail(format!("train.folds must be at least 2, got {}", self.folds));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch sizes must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train.train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        self.model.validate()
    }
}
