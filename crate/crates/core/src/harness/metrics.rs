//! Ranking and threshold metrics for binary slide labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s} cannot be ranked")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::contract(format!("label {l} is not binary")));
    }
    Ok(())
}

/// Mann–Whitney ROC AUC: `(concordant + ½·tied) / (n_pos·n_neg)`.
///
/// Pair counts are kept as integers (in half-pair units) and divided once,
/// so the value is independent of how pairs are enumerated.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut half_pairs: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        half_pairs += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(half_pairs as f64 / (2 * n_pos * n_neg) as f64)
}

/// Ranking used by [`average_precision`]: descending score, ties by original
/// index.
pub fn descending_rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Step-wise average precision: the mean over positives of the precision at
/// each positive's rank.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive".into()));
    }
    let mut tp = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in descending_rank_order(scores).iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            acc += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(acc / n_pos as f64)
}

/// Sensitivity and specificity at a fixed threshold (`score ≥ threshold`
/// predicts positive). Each is `None` when its class is absent.
pub fn sens_spec(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(Option<f64>, Option<f64>)> {
    check_inputs(scores, labels)?;
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (l == 1, s >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Ok((ratio(tp, fn_), ratio(tn, fp)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub average_precision: f64,
    pub roc_auc: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub epochs_run: usize,
}

impl FoldMetrics {
    /// Test-set metrics from slide probabilities.
    pub fn from_predictions(fold: usize, probs: &[f64], labels: &[u8]) -> Result<Self> {
        let (sensitivity, specificity) = sens_spec(probs, labels, 0.5)?;
        Ok(Self {
            fold,
            average_precision: average_precision(probs, labels)?,
            roc_auc: roc_auc(probs, labels)?,
            sensitivity,
            specificity,
            n_train: 0,
            n_val: 0,
            n_test: labels.len(),
            best_epoch: 0,
            epochs_run: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (`n − 1`); 0 for a single value.
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub average_precision: Summary,
    pub roc_auc: Summary,
    pub sensitivity: Option<Summary>,
    pub specificity: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_kind: String,
    pub folds: Vec<FoldMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn new(model_kind: String, folds: Vec<FoldMetrics>) -> Result<Self> {
        let aggregate = Self::aggregate(&folds)?;
        Ok(Self {
            model_kind,
            folds,
            aggregate,
        })
    }

    pub fn aggregate(folds: &[FoldMetrics]) -> Result<Aggregate> {
        let col = |f: fn(&FoldMetrics) -> Option<f64>| folds.iter().filter_map(f).collect::<Vec<_>>();
        let missing = || Error::UndefinedMetric("no folds to aggregate".into());
        Ok(Aggregate {
            average_precision: Summary::of(&col(|f| Some(f.average_precision))).ok_or_else(missing)?,
            roc_auc: Summary::of(&col(|f| Some(f.roc_auc))).ok_or_else(missing)?,
            sensitivity: Summary::of(&col(|f| f.sensitivity)),
            specificity: Summary::of(&col(|f| f.specificity)),
        })
    }
}
