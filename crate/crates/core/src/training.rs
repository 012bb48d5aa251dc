//! The reprogramming loop: alternate sparse reprojection of `Θ` with
//! gradient descent on the task loss through the frozen classifier.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bioseq::{Label, TaskDataset, TaskKind};
use crate::embeddings::{EmbeddingMatrix, PAD_ID};
use crate::evaluation::{classification_report, spearman_rho, EvalError, EvalReport, MetricKind};
use crate::frozen_model::{FrozenClassifier, ModelError, SequenceGrad};
use crate::labelmap::{LabelMapError, LabelMapping};
use crate::linalg::dot;
use crate::sparse_map::{
    reconstruct, reproject, sparse_code_all, CoefficientMap, DenseTheta, SparseCodeConfig,
    SparseError, SparseRow,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("token id {token} has no row in the {rows}-row target embedding table")]
    Vocabulary { token: usize, rows: usize },
    #[error("label set mismatch: {0}")]
    LabelSet(String),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("non-finite loss {loss} at iteration {iter}")]
    NonFiniteLoss { iter: usize, loss: f64 },
    #[error("sequence has no unmasked positions")]
    NoTokens,
    #[error("no training items")]
    EmptyDataset,
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    LabelMap(#[from] LabelMapError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "alpha", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant(f64),
    /// `α / √(t + 1)`
    InvSqrt(f64),
}

impl StepSchedule {
    pub fn at(self, t: usize) -> f64 {
        match self {
            Self::Constant(a) => a,
            Self::InvSqrt(a) => a / ((t + 1) as f64).sqrt(),
        }
    }

    fn base(self) -> f64 {
        match self {
            Self::Constant(a) | Self::InvSqrt(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Outer iterations (gradient steps).
    pub outer_iters: usize,
    /// Pass cap for sparse coding.
    pub inner_iters: usize,
    pub schedule: StepSchedule,
    pub batch_size: usize,
    pub k: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// Outer iterations between reprojections; in between, updates touch
    /// only the current support.
    pub reproject_every: usize,
    pub task_kind: TaskKind,
    /// Record wall time per iteration. Off by default so history files are
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_iters: 200,
            inner_iters: 1,
            schedule: StepSchedule::Constant(0.05),
            batch_size: 32,
            k: 8,
            epsilon: 0.0,
            seed: 0,
            reproject_every: 1,
            task_kind: TaskKind::SequenceClassification,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.outer_iters == 0 {
            return bad("outer_iters must be >= 1");
        }
        if self.inner_iters == 0 {
            return bad("inner_iters must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.reproject_every == 0 {
            return bad("reproject_every must be >= 1");
        }
        // A zero step is accepted: it is the identity check for the loop.
        let a = self.schedule.base();
        if !(a.is_finite() && a >= 0.0) {
            return bad("step size must be finite and non-negative");
        }
        Ok(())
    }

    pub fn sparse_config(&self) -> SparseCodeConfig {
        SparseCodeConfig {
            k: self.k,
            epsilon: self.epsilon,
            max_inner_iters: self.inner_iters,
            ..SparseCodeConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iter: usize,
    /// Mean training loss at the start of the iteration.
    pub loss: f64,
    /// Training accuracy, or Spearman's rho for regression.
    pub metric: f64,
    /// `‖V_T − Θ·V_S‖_F` from the most recent sparse coding step.
    pub recon_error: f64,
    /// Nonzeros in `Θ` after the iteration (the trainable-parameter count).
    pub nnz: usize,
    pub secs: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss,metric,recon_error,nnz,secs\n");
        for r in &self.records {
            let secs = r.secs.map(|s| format!("{s:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iter, r.loss, r.metric, r.recon_error, r.nnz, secs
            ));
        }
        out
    }
}

/// Row-wise log-softmax cross-entropy, summed (not averaged) over unmasked
/// rows. Returns the sum and the unscaled gradient `softmax − onehot`.
fn cross_entropy_sum(
    logits: &[f64],
    n_classes: usize,
    labels: &[usize],
    mask: Option<&[bool]>,
) -> Result<(f64, Vec<f64>, usize)> {
    if logits.len() != labels.len() * n_classes {
        return Err(TrainError::Model(ModelError::DimensionMismatch {
            expected: labels.len() * n_classes,
            actual: logits.len(),
        }));
    }
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut count = 0;
    for (i, &y) in labels.iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if y >= n_classes {
            return Err(TrainError::LabelOutOfRange {
                label: y,
                n_classes,
            });
        }
        let row = &logits[i * n_classes..(i + 1) * n_classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let sum_exp: f64 = exp.iter().sum();
        loss += max + sum_exp.ln() - row[y];
        for (c, g) in grad[i * n_classes..(i + 1) * n_classes]
            .iter_mut()
            .enumerate()
        {
            *g = exp[c] / sum_exp - f64::from(c == y);
        }
        count += 1;
    }
    Ok((loss, grad, count))
}

/// Mean cross-entropy over unmasked rows of `logits` (rows × n_classes) and
/// its gradient `(softmax − onehot) / count`.
pub fn cross_entropy_loss(
    logits: &[f64],
    n_classes: usize,
    labels: &[usize],
    mask: Option<&[bool]>,
) -> Result<(f64, Vec<f64>)> {
    let (sum, mut grad, count) = cross_entropy_sum(logits, n_classes, labels, mask)?;
    if count == 0 {
        return Err(TrainError::NoTokens);
    }
    let scale = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((sum * scale, grad))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// A training sequence with labels already mapped into source classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: ExampleTarget,
    /// The real-valued label for regression tasks.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExampleTarget {
    Sequence(usize),
    PerToken(Vec<usize>),
}

/// Maps dataset labels through `h` into source classes, checking that the
/// dataset's label set and the mapping agree.
pub fn prepare_examples(
    dataset: &TaskDataset,
    indices: &[usize],
    mapping: &LabelMapping,
) -> Result<Vec<Example>> {
    let class_map: Vec<usize> = match dataset.kind {
        TaskKind::Regression => {
            if !mapping.is_regression() {
                return Err(TrainError::LabelSet(
                    "regression task needs a threshold mapping".into(),
                ));
            }
            Vec::new()
        }
        _ => {
            if mapping.is_regression() {
                return Err(TrainError::LabelSet(
                    "classification task needs a bijection mapping".into(),
                ));
            }
            dataset
                .label_names
                .iter()
                .map(|name| {
                    mapping.invert(name).map_err(|_| {
                        TrainError::LabelSet(format!(
                            "dataset label {name:?} is not in the mapping"
                        ))
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    indices
        .iter()
        .map(|&i| {
            let item = &dataset.items[i];
            let (target, value) = match &item.label {
                Label::Class(c) => (ExampleTarget::Sequence(class_map[*c]), None),
                Label::PerToken(ls) => (
                    ExampleTarget::PerToken(ls.iter().map(|&c| class_map[c]).collect()),
                    None,
                ),
                Label::Real(y) => (ExampleTarget::Sequence(mapping.bin_label(*y)?), Some(*y)),
            };
            Ok(Example {
                tokens: item.sequence.clone(),
                target,
                value,
            })
        })
        .collect()
}

struct SequenceResult {
    loss_sum: f64,
    count: usize,
    correct: usize,
    expected_value: Option<f64>,
    /// Per-position input gradient, unscaled by the batch count.
    dx: Vec<f64>,
}

fn embed(tokens: &[usize], table: &EmbeddingMatrix) -> Result<(Vec<f64>, Vec<bool>)> {
    let dim = table.dim();
    let mut x = vec![0.0; tokens.len() * dim];
    let mut mask = vec![false; tokens.len()];
    for (l, &t) in tokens.iter().enumerate() {
        if t >= table.rows() {
            return Err(TrainError::Vocabulary {
                token: t,
                rows: table.rows(),
            });
        }
        if t == PAD_ID {
            continue;
        }
        mask[l] = true;
        x[l * dim..(l + 1) * dim].copy_from_slice(table.row(t));
    }
    if !mask.iter().any(|&m| m) {
        return Err(TrainError::NoTokens);
    }
    Ok((x, mask))
}

fn run_sequence(
    ex: &Example,
    table: &EmbeddingMatrix,
    model: &FrozenClassifier,
    mapping: &LabelMapping,
    backward: bool,
) -> Result<SequenceResult> {
    let n = model.n_classes();
    let (x, mask) = embed(&ex.tokens, table)?;
    let trace = model.forward_sequence(&x, &mask)?;
    let (loss_sum, grad, count, correct, expected_value) = match &ex.target {
        ExampleTarget::Sequence(y) => {
            let logits = trace.pooled_logits();
            let (loss, grad, count) = cross_entropy_sum(logits, n, &[*y], None)?;
            let ev = match ex.value {
                Some(_) => Some(mapping.expected_value(&softmax(logits))?),
                None => None,
            };
            (loss, grad, count, usize::from(argmax(logits) == *y), ev)
        }
        ExampleTarget::PerToken(ys) => {
            let logits = trace.token_logits();
            let (loss, grad, count) = cross_entropy_sum(logits, n, ys, Some(&mask))?;
            let correct = ys
                .iter()
                .enumerate()
                .filter(|&(l, &y)| mask[l] && argmax(&logits[l * n..(l + 1) * n]) == y)
                .count();
            (loss, grad, count, correct, None)
        }
    };
    let dx = if backward {
        let g = match ex.target {
            ExampleTarget::Sequence(_) => SequenceGrad::Pooled(&grad),
            ExampleTarget::PerToken(_) => SequenceGrad::PerToken(&grad),
        };
        model.backward_sequence(&trace, g, None)?
    } else {
        Vec::new()
    };
    Ok(SequenceResult {
        loss_sum,
        count,
        correct,
        expected_value,
        dx,
    })
}

/// Loss, metric and (optionally) the gradient with respect to each target
/// token's embedding over a set of examples.
struct BatchStats {
    loss: f64,
    metric: f64,
    /// target_rows × dim, `dL/dv_t` summed over positions holding token `t`
    token_grad: Vec<f64>,
}

fn batch_stats(
    examples: &[&Example],
    table: &EmbeddingMatrix,
    model: &FrozenClassifier,
    mapping: &LabelMapping,
    backward: bool,
) -> Result<BatchStats> {
    let results: Vec<SequenceResult> = examples
        .par_iter()
        .map(|ex| run_sequence(ex, table, model, mapping, backward))
        .collect::<Result<_>>()?;
    let count: usize = results.iter().map(|r| r.count).sum();
    if count == 0 {
        return Err(TrainError::NoTokens);
    }
    let scale = 1.0 / count as f64;
    let loss = results.iter().map(|r| r.loss_sum).sum::<f64>() * scale;
    let is_regression = examples.first().is_some_and(|e| e.value.is_some());
    let metric = if is_regression {
        let pred: Vec<f64> = results
            .iter()
            .map(|r| r.expected_value.unwrap_or(0.0))
            .collect();
        let truth: Vec<f64> = examples.iter().map(|e| e.value.unwrap_or(0.0)).collect();
        spearman_rho(&pred, &truth).unwrap_or(f64::NAN)
    } else {
        results.iter().map(|r| r.correct).sum::<usize>() as f64 * scale
    };

    let dim = table.dim();
    let mut token_grad = vec![0.0; table.rows() * dim];
    if backward {
        // Fixed reduction order: examples in batch order, positions in order.
        for (ex, r) in examples.iter().zip(&results) {
            for (l, &t) in ex.tokens.iter().enumerate() {
                if t == PAD_ID {
                    continue;
                }
                let g = &mut token_grad[t * dim..(t + 1) * dim];
                for (gi, d) in g.iter_mut().zip(&r.dx[l * dim..(l + 1) * dim]) {
                    *gi += d * scale;
                }
            }
        }
    }
    Ok(BatchStats {
        loss,
        metric,
        token_grad,
    })
}

/// `dL/dΘ[t][j] = (dL/dv_t) · V_S[j]` for every row with a nonzero gradient.
fn theta_gradient(token_grad: &[f64], dictionary: &EmbeddingMatrix, rows: usize) -> Vec<f64> {
    let dim = dictionary.dim();
    let cols = dictionary.rows();
    let mut out = vec![0.0; rows * cols];
    for t in 0..rows {
        let g = &token_grad[t * dim..(t + 1) * dim];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for j in 0..cols {
            out[t * cols + j] = dot(g, dictionary.row(j));
        }
    }
    out
}

fn dense_table(dense: &DenseTheta, dictionary: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let dim = dictionary.dim();
    let mut data = vec![0.0; dense.rows * dim];
    for t in 0..dense.rows {
        let out = &mut data[t * dim..(t + 1) * dim];
        for (j, &c) in dense.row(t).iter().enumerate() {
            if c != 0.0 {
                for (o, v) in out.iter_mut().zip(dictionary.row(j)) {
                    *o += c * v;
                }
            }
        }
    }
    EmbeddingMatrix::new(dense.rows, dim, data).map_err(|e| TrainError::Config(e.to_string()))
}

/// Mean loss over `examples` with `V_T = Θ·V_S` for a dense `Θ`, and the full
/// gradient `dL/dΘ` (rows × source columns).
pub fn loss_and_theta_gradient(
    dense: &DenseTheta,
    dictionary: &EmbeddingMatrix,
    model: &FrozenClassifier,
    mapping: &LabelMapping,
    examples: &[Example],
) -> Result<(f64, Vec<f64>)> {
    let table = dense_table(dense, dictionary)?;
    let refs: Vec<&Example> = examples.iter().collect();
    let stats = batch_stats(&refs, &table, model, mapping, true)?;
    Ok((
        stats.loss,
        theta_gradient(&stats.token_grad, dictionary, dense.rows),
    ))
}

/// Random unit-norm rows; the padding row (if any) is zero.
pub fn random_target_init(
    rows: usize,
    dim: usize,
    pad: Option<usize>,
    seed: u64,
) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dot(&v, &v).sqrt();
        if Some(r) == pad || norm == 0.0 {
            v.iter_mut().for_each(|x| *x = 0.0);
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        data.extend(v);
    }
    EmbeddingMatrix::new(rows, dim, data).expect("shape is consistent")
}

/// Seeded batch order: each epoch shuffles, groups sequences of similar
/// length, then shuffles the groups.
struct Batcher {
    indices: Vec<usize>,
    lengths: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
    queue: Vec<Vec<usize>>,
}

impl Batcher {
    fn new(lengths: Vec<usize>, batch_size: usize, seed: u64) -> Self {
        Self {
            indices: (0..lengths.len()).collect(),
            lengths,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xba7c),
            queue: Vec::new(),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            if self.batch_size >= self.indices.len() {
                self.queue.push(self.indices.clone());
            } else {
                let mut order = self.indices.clone();
                order.shuffle(&mut self.rng);
                order.sort_by_key(|&i| self.lengths[i]);
                let mut batches: Vec<Vec<usize>> = order
                    .chunks(self.batch_size)
                    .map(<[usize]>::to_vec)
                    .collect();
                batches.shuffle(&mut self.rng);
                batches.reverse();
                self.queue = batches;
            }
        }
        self.queue.pop().expect("queue refilled")
    }

    fn covers_all(&self) -> bool {
        self.batch_size >= self.indices.len()
    }
}

fn check_inputs(
    examples: &[Example],
    dictionary: &EmbeddingMatrix,
    init: &EmbeddingMatrix,
    model: &FrozenClassifier,
    mapping: &LabelMapping,
    cfg: &TrainConfig,
    dataset: &TaskDataset,
) -> Result<()> {
    cfg.validate()?;
    if cfg.task_kind != dataset.kind {
        return Err(TrainError::Config(format!(
            "config task kind {:?} does not match dataset kind {:?}",
            cfg.task_kind, dataset.kind
        )));
    }
    if model.dim() != dictionary.dim() {
        return Err(ModelError::DimensionMismatch {
            expected: model.dim(),
            actual: dictionary.dim(),
        }
        .into());
    }
    if init.dim() != dictionary.dim() {
        return Err(SparseError::DimensionMismatch {
            expected: dictionary.dim(),
            actual: init.dim(),
        }
        .into());
    }
    mapping.check_model_classes(model.n_classes())?;
    for ex in examples {
        if let Some(&t) = ex.tokens.iter().find(|&&t| t >= init.rows()) {
            return Err(TrainError::Vocabulary {
                token: t,
                rows: init.rows(),
            });
        }
    }
    Ok(())
}

/// Trains `Θ` on the dataset's training split. `init` supplies the initial
/// target embeddings (one row per target token) that are sparse-coded to
/// give the starting `Θ`.
pub fn train_r2dl(
    dataset: &TaskDataset,
    dictionary: &EmbeddingMatrix,
    init: &EmbeddingMatrix,
    model: &FrozenClassifier,
    mapping: &LabelMapping,
    cfg: &TrainConfig,
) -> Result<(CoefficientMap, TrainHistory)> {
    train_r2dl_on(
        dataset,
        &dataset.split.train,
        dictionary,
        init,
        model,
        mapping,
        cfg,
    )
}

/// As [`train_r2dl`], restricted to the given item indices.
pub fn train_r2dl_on(
    dataset: &TaskDataset,
    train_indices: &[usize],
    dictionary: &EmbeddingMatrix,
    init: &EmbeddingMatrix,
    model: &FrozenClassifier,
    mapping: &LabelMapping,
    cfg: &TrainConfig,
) -> Result<(CoefficientMap, TrainHistory)> {
    if train_indices.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let examples = prepare_examples(dataset, train_indices, mapping)?;
    check_inputs(&examples, dictionary, init, model, mapping, cfg, dataset)?;
    model.verify_frozen()?;
    let frozen_hash = model.param_hash().to_string();

    let scfg = cfg.sparse_config();
    let (mut theta, report) = sparse_code_all(init, dictionary, &scfg)?;
    let mut recon_error = report.frobenius_residual;
    let all: Vec<&Example> = examples.iter().collect();
    let mut batcher = Batcher::new(
        examples.iter().map(|e| e.tokens.len()).collect(),
        cfg.batch_size,
        cfg.seed,
    );
    let mut history = TrainHistory::default();
    let cols = dictionary.rows();

    for t in 0..cfg.outer_iters {
        let started = Instant::now();
        let table = reconstruct(&theta, dictionary)?;
        let batch_ids = batcher.next_batch();
        let batch: Vec<&Example> = batch_ids.iter().map(|&i| &examples[i]).collect();
        let stats = batch_stats(&batch, &table, model, mapping, true)?;
        let (loss, metric) = if batcher.covers_all() {
            (stats.loss, stats.metric)
        } else {
            let full = batch_stats(&all, &table, model, mapping, false)?;
            (full.loss, full.metric)
        };
        if !loss.is_finite() || !stats.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iter: t,
                loss: if loss.is_finite() { stats.loss } else { loss },
            });
        }
        let alpha = cfg.schedule.at(t);
        let grad = theta_gradient(&stats.token_grad, dictionary, theta.target_rows);

        if t % cfg.reproject_every == 0 {
            // Full dense step, then restore k-sparsity; the support may move.
            let mut dense = theta.to_dense();
            for (d, g) in dense.data.iter_mut().zip(&grad) {
                *d -= alpha * g;
            }
            let (next, report) = reproject(&dense, dictionary, &scfg)?;
            theta = next;
            recon_error = report.frobenius_residual;
        } else {
            // Between reprojections only existing nonzeros move.
            for (r, row) in theta.rows.iter_mut().enumerate() {
                let updated: Vec<(usize, f64)> = row
                    .entries()
                    .iter()
                    .map(|&(j, c)| (j, c - alpha * grad[r * cols + j]))
                    .collect();
                *row = SparseRow::new(updated);
            }
        }
        theta.validate()?;
        history.records.push(HistoryRecord {
            iter: t,
            loss,
            metric,
            recon_error,
            nnz: theta.nnz(),
            secs: cfg.record_time.then(|| started.elapsed().as_secs_f64()),
        });
        log::debug!(
            "iter {t}: loss {loss:.6} metric {metric:.4} nnz {}",
            theta.nnz()
        );
    }

    model.verify_frozen()?;
    if model.param_hash() != frozen_hash {
        return Err(ModelError::ParametersMutated {
            before: frozen_hash,
            after: model.param_hash().to_string(),
        }
        .into());
    }
    Ok((theta, history))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Class(String),
    PerToken(Vec<String>),
    Value(f64),
}

/// Inference with a trained map: `h(C(Θ·V_S, x))`.
pub struct Predictor<'a> {
    table: EmbeddingMatrix,
    model: &'a FrozenClassifier,
    mapping: &'a LabelMapping,
    kind: TaskKind,
}

impl<'a> Predictor<'a> {
    pub fn new(
        theta: &CoefficientMap,
        dictionary: &EmbeddingMatrix,
        model: &'a FrozenClassifier,
        mapping: &'a LabelMapping,
        kind: TaskKind,
    ) -> Result<Self> {
        theta.check_dictionary(dictionary)?;
        model.verify_frozen()?;
        mapping.check_model_classes(model.n_classes())?;
        if (kind == TaskKind::Regression) != mapping.is_regression() {
            return Err(TrainError::LabelSet(format!(
                "{kind:?} task with an incompatible label mapping"
            )));
        }
        Ok(Self {
            table: reconstruct(theta, dictionary)?,
            model,
            mapping,
            kind,
        })
    }

    /// Source-class logits: pooled (one row) or per token (L rows).
    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let (x, mask) = embed(tokens, &self.table)?;
        let trace = self.model.forward_sequence(&x, &mask)?;
        Ok(match self.kind {
            TaskKind::TokenClassification => trace.token_logits().to_vec(),
            _ => trace.pooled_logits().to_vec(),
        })
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<Prediction> {
        let logits = self.logits(tokens)?;
        let n = self.model.n_classes();
        Ok(match self.kind {
            TaskKind::SequenceClassification => {
                Prediction::Class(self.mapping.map_label(argmax(&logits))?.to_string())
            }
            TaskKind::TokenClassification => Prediction::PerToken(
                tokens
                    .iter()
                    .enumerate()
                    .filter(|&(_, &t)| t != PAD_ID)
                    .map(|(l, _)| {
                        Ok(self
                            .mapping
                            .map_label(argmax(&logits[l * n..(l + 1) * n]))?
                            .to_string())
                    })
                    .collect::<Result<_>>()?,
            ),
            TaskKind::Regression => {
                Prediction::Value(self.mapping.expected_value(&softmax(&logits))?)
            }
        })
    }

    /// Scores in target-class order for classification tasks.
    fn target_scores(&self, source_logits: &[f64], names: &[String]) -> Result<Vec<f64>> {
        names
            .iter()
            .map(|name| Ok(source_logits[self.mapping.invert(name)?]))
            .collect()
    }
}

/// Test-split report: top-1 accuracy with a confusion matrix for
/// classification (per residue for token tasks), Spearman's rho for
/// regression.
pub fn evaluate(
    predictor: &Predictor<'_>,
    dataset: &TaskDataset,
    task: &str,
) -> Result<EvalReport> {
    evaluate_on(predictor, dataset, &dataset.split.test, task)
}

pub fn evaluate_on(
    predictor: &Predictor<'_>,
    dataset: &TaskDataset,
    indices: &[usize],
    task: &str,
) -> Result<EvalReport> {
    let n = predictor.model.n_classes();
    let logits: Vec<Vec<f64>> = indices
        .par_iter()
        .map(|&i| predictor.logits(&dataset.items[i].sequence))
        .collect::<Result<_>>()?;
    match dataset.kind {
        TaskKind::Regression => {
            let mut pred = Vec::with_capacity(indices.len());
            let mut truth = Vec::with_capacity(indices.len());
            for (&i, l) in indices.iter().zip(&logits) {
                pred.push(predictor.mapping.expected_value(&softmax(l))?);
                if let Label::Real(y) = dataset.items[i].label {
                    truth.push(y);
                }
            }
            Ok(EvalReport {
                task: task.into(),
                metric: MetricKind::Spearman,
                value: spearman_rho(&pred, &truth)?,
                n_test: indices.len(),
                confusion: None,
                data_efficiency: None,
            })
        }
        _ => {
            let names = &dataset.label_names;
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for (&i, l) in indices.iter().zip(&logits) {
                let item = &dataset.items[i];
                match &item.label {
                    Label::Class(c) => {
                        scores.push(predictor.target_scores(l, names)?);
                        labels.push(*c);
                    }
                    Label::PerToken(ys) => {
                        for (pos, (&tok, &y)) in item.sequence.iter().zip(ys).enumerate() {
                            if tok == PAD_ID {
                                continue;
                            }
                            scores
                                .push(predictor.target_scores(&l[pos * n..(pos + 1) * n], names)?);
                            labels.push(y);
                        }
                    }
                    Label::Real(_) => unreachable!("validated dataset"),
                }
            }
            Ok(classification_report(task, &scores, &labels, names.len())?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn uniform_logits_give_ln2() {
        let (loss, grad) = cross_entropy_loss(&[0.3, 0.3], 2, &[1], None).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, vec![0.5, -0.5]);
    }

    #[test]
    fn peaked_logits_give_small_loss() {
        let (loss, _) = cross_entropy_loss(&[0.0, 50.0], 2, &[1], None).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            cross_entropy_loss(&[0.0, 1.0], 2, &[2], None),
            Err(TrainError::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn loss_matches_direct_sum_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let rows = 6;
        let logits: Vec<f64> = (0..rows * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..n)).collect();
        let mask = [true, false, true, true, false, true];
        let (loss, grad) = cross_entropy_loss(&logits, n, &labels, Some(&mask)).unwrap();

        let mut direct = 0.0;
        for r in (0..rows).filter(|&r| mask[r]) {
            let row = &logits[r * n..(r + 1) * n];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            direct += -(row[labels[r]].exp() / z).ln();
        }
        assert!((loss - direct / 4.0).abs() < 1e-12);

        let h = 1e-6;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p[i] += h;
            let mut m = logits.clone();
            m[i] -= h;
            let fd = (cross_entropy_loss(&p, n, &labels, Some(&mask)).unwrap().0
                - cross_entropy_loss(&m, n, &labels, Some(&mask)).unwrap().0)
                / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-6 * fd.abs().max(1e-3),
                "{i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn schedules() {
        assert_eq!(StepSchedule::Constant(0.1).at(99), 0.1);
        assert_eq!(StepSchedule::InvSqrt(0.1).at(3), 0.05);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                outer_iters: 0,
                ..Default::default()
            },
            TrainConfig {
                inner_iters: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                schedule: StepSchedule::Constant(-1.0),
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn init_has_unit_rows_and_zero_pad() {
        let v = random_target_init(21, 8, Some(PAD_ID), 3);
        for r in 0..20 {
            assert!((dot(v.row(r), v.row(r)).sqrt() - 1.0).abs() < 1e-12);
        }
        assert!(v.row(PAD_ID).iter().all(|&x| x == 0.0));
    }
}
