//! Metrics and experiment harnesses.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty evaluation set")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations for a correlation")]
    TooShort,
    #[error("correlation undefined: a rank vector has zero variance")]
    ZeroVariance,
    #[error("label {label} outside 0..{n}")]
    LabelOutOfRange { label: usize, n: usize },
    #[error("top-{j} requested but predictions rank {n} classes")]
    RankDepth { j: usize, n: usize },
    #[error("training sequence count must be >= 1")]
    ZeroCount,
    #[error("fraction {0} must lie in (0, 1]")]
    BadFraction(f64),
    #[error("fraction {fraction} of {total} items leaves an empty training set")]
    EmptySubset { fraction: f64, total: usize },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Class ids ordered by descending score; ties keep the lower id first.
pub fn rank_classes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Fraction of items whose label appears in the first `j` ranked classes.
pub fn top_n_accuracy(rankings: &[Vec<usize>], labels: &[usize], j: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(EvalError::Empty);
    }
    if rankings.len() != labels.len() {
        return Err(EvalError::LengthMismatch(rankings.len(), labels.len()));
    }
    let mut hits = 0;
    for (rank, &label) in rankings.iter().zip(labels) {
        if j > rank.len() {
            return Err(EvalError::RankDepth { j, n: rank.len() });
        }
        if rank[..j].contains(&label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// 1-based ranks, ties receive the average of the positions they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average-rank vectors.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EvalError::TooShort);
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for j in 0..self.n {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&i.to_string());
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(predicted: &[usize], truth: &[usize], n: usize) -> Result<ConfusionMatrix> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), truth.len()));
    }
    let mut counts = vec![vec![0u64; n]; n];
    for (&p, &t) in predicted.iter().zip(truth) {
        for label in [p, t] {
            if label >= n {
                return Err(EvalError::LabelOutOfRange { label, n });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { n, counts })
}

/// Accuracy per domain sequence consumed (pretraining corpus plus labeled set).
pub fn data_efficiency(accuracy: f64, training_sequences: u64) -> Result<f64> {
    if training_sequences == 0 {
        return Err(EvalError::ZeroCount);
    }
    Ok(accuracy / training_sequences as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Top1Accuracy,
    TopNAccuracy,
    Spearman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: MetricKind,
    pub value: f64,
    pub n_test: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_efficiency: Option<f64>,
}

impl EvalReport {
    /// Checks the report's internal consistency.
    pub fn check(&self) -> Result<(), String> {
        match self.metric {
            MetricKind::Spearman if !(-1.0..=1.0).contains(&self.value) => {
                return Err(format!("rho {} outside [-1, 1]", self.value))
            }
            MetricKind::Top1Accuracy | MetricKind::TopNAccuracy
                if !(0.0..=1.0).contains(&self.value) =>
            {
                return Err(format!("accuracy {} outside [0, 1]", self.value))
            }
            _ => {}
        }
        if let Some(c) = &self.confusion {
            if c.total() as usize != self.n_test {
                return Err(format!(
                    "confusion total {} != n_test {}",
                    c.total(),
                    self.n_test
                ));
            }
            if self.metric == MetricKind::Top1Accuracy && (c.accuracy() - self.value).abs() > 1e-12
            {
                return Err(format!(
                    "top-1 accuracy {} != confusion trace ratio {}",
                    self.value,
                    c.accuracy()
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let metric = serde_json::to_value(self.metric).unwrap();
        let eff = self
            .data_efficiency
            .map(|e| format!("{e:e}"))
            .unwrap_or_default();
        format!(
            "task,metric,value,n_test,data_efficiency\n{},{},{},{},{}\n",
            self.task,
            metric.as_str().unwrap(),
            self.value,
            self.n_test,
            eff
        )
    }
}

/// Builds a top-1 classification report from per-item class scores.
pub fn classification_report(
    task: &str,
    scores: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
) -> Result<EvalReport> {
    let rankings: Vec<Vec<usize>> = scores.iter().map(|s| rank_classes(s)).collect();
    let value = top_n_accuracy(&rankings, labels, 1)?;
    let predicted: Vec<usize> = rankings.iter().map(|r| r[0]).collect();
    let confusion = confusion_matrix(&predicted, labels, n_classes)?;
    let report = EvalReport {
        task: task.into(),
        metric: MetricKind::Top1Accuracy,
        value,
        n_test: labels.len(),
        confusion: Some(confusion),
        data_efficiency: None,
    };
    debug_assert_eq!(report.check(), Ok(()));
    Ok(report)
}

/// Nested seeded subsets: a smaller fraction's items are a prefix of every
/// larger fraction's items.
pub fn nested_subsets(items: &[usize], fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut order = items.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    fractions
        .iter()
        .map(|&f| {
            if !(f > 0.0 && f <= 1.0) {
                return Err(EvalError::BadFraction(f));
            }
            let size = (f * items.len() as f64).floor() as usize;
            if size == 0 {
                return Err(EvalError::EmptySubset {
                    fraction: f,
                    total: items.len(),
                });
            }
            Ok(order[..size].to_vec())
        })
        .collect()
}

pub const DEFAULT_FRACTIONS: [f64; 4] = [1.0, 0.8, 0.6, 0.4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub method: String,
    pub train_size: usize,
    pub metric: MetricKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,method,train_size,metric,value\n");
        for r in &self.rows {
            let metric = serde_json::to_value(r.metric).unwrap();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.fraction,
                r.method,
                r.train_size,
                metric.as_str().unwrap(),
                r.value
            ));
        }
        out
    }
}

/// Chance-level baselines for a class distribution: uniform `1/n` and the
/// majority-class rate.
pub fn chance_baselines(labels: &[usize], n_classes: usize) -> (f64, f64) {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l < n_classes {
            counts[l] += 1;
        }
    }
    let majority = counts.iter().copied().max().unwrap_or(0) as f64 / labels.len().max(1) as f64;
    (1.0 / n_classes as f64, majority)
}

/// Trains on nested subsets of `train` for each fraction with the test set
/// held fixed. `train_fn` receives the subset and returns the test report.
/// For classification, pass the test labels and class count to add the
/// random-guess rows.
pub fn restricted_sweep<F>(
    train: &[usize],
    fractions: &[f64],
    seed: u64,
    chance: Option<(&[usize], usize)>,
    mut train_fn: F,
) -> Result<SweepReport>
where
    F: FnMut(&[usize], f64) -> EvalReport,
{
    let subsets = nested_subsets(train, fractions, seed)?;
    let mut rows = Vec::new();
    for (&fraction, subset) in fractions.iter().zip(&subsets) {
        let report = train_fn(subset, fraction);
        rows.push(SweepRow {
            fraction,
            method: "r2dl".into(),
            train_size: subset.len(),
            metric: report.metric,
            value: report.value,
        });
        if let Some((test_labels, n)) = chance {
            let (uniform, majority) = chance_baselines(test_labels, n);
            for (method, value) in [("random_guess", uniform), ("majority_class", majority)] {
                rows.push(SweepRow {
                    fraction,
                    method: method.into(),
                    train_size: subset.len(),
                    metric: MetricKind::Top1Accuracy,
                    value,
                });
            }
        }
    }
    Ok(SweepReport { rows })
}
