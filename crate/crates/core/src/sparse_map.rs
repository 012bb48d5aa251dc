//! Sparse coding of target embeddings against a fixed source dictionary.
//!
//! Each target row `v_t` is approximated as `θ_t · V_S` with at most `k`
//! nonzero coefficients, selected greedily by orthogonal matching pursuit.
//! The dictionary is never updated.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::EmbeddingMatrix;
use crate::linalg::{axpy, dot, least_squares, norm2, IncrementalQr};

/// Relative residual below which a target counts as exactly represented.
const EXACT_RESIDUAL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("every dictionary row has zero norm")]
    AllZeroDictionary,
    #[error("dictionary hash mismatch: coefficient map was coded against {expected}, dictionary is {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("invalid sparse-code config: {0}")]
    InvalidConfig(String),
    #[error("coefficient map: {0}")]
    InvalidMap(String),
    #[error("theta tsv line {line}: {reason}")]
    Tsv { line: usize, reason: String },
}

pub type Result<T, E = SparseError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResidualNorm {
    L1,
    #[default]
    L2,
    LInf,
}

impl ResidualNorm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            ResidualNorm::L1 => v.iter().map(|x| x.abs()).sum(),
            ResidualNorm::L2 => norm2(v),
            ResidualNorm::LInf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Tolerance {
    /// Stop when `‖residual‖ ≤ ε·‖v_t‖`.
    #[default]
    Relative,
    /// Stop when `‖residual‖ ≤ ε`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseCodeConfig {
    pub k: usize,
    pub epsilon: f64,
    /// Cap on full passes over the target rows.
    pub max_inner_iters: usize,
    pub norm: ResidualNorm,
    pub tolerance: Tolerance,
}

impl Default for SparseCodeConfig {
    fn default() -> Self {
        Self {
            k: 8,
            epsilon: 0.0,
            max_inner_iters: 1,
            norm: ResidualNorm::L2,
            tolerance: Tolerance::Relative,
        }
    }
}

impl SparseCodeConfig {
    pub fn validate(&self, dictionary_rows: usize) -> Result<()> {
        if self.k == 0 {
            return Err(SparseError::InvalidConfig("k must be >= 1".into()));
        }
        if self.k > dictionary_rows {
            return Err(SparseError::InvalidConfig(format!(
                "k = {} exceeds dictionary size {dictionary_rows}",
                self.k
            )));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(SparseError::InvalidConfig("epsilon must be >= 0".into()));
        }
        if self.max_inner_iters == 0 {
            return Err(SparseError::InvalidConfig(
                "max_inner_iters must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn threshold(&self, target: &[f64]) -> f64 {
        match self.tolerance {
            Tolerance::Relative => self.epsilon * self.norm.of(target),
            Tolerance::Absolute => self.epsilon,
        }
    }
}

/// One sparse row: `(source_id, coefficient)` pairs sorted by source id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRow(Vec<(usize, f64)>);

impl SparseRow {
    pub fn new(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by_key(|&(j, _)| j);
        Self(entries)
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.0
    }

    pub fn nnz(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, source_id: usize) -> f64 {
        self.0
            .binary_search_by_key(&source_id, |&(j, _)| j)
            .map_or(0.0, |i| self.0[i].1)
    }

    /// `θ_t · V_S`
    pub fn combine(&self, dictionary: &EmbeddingMatrix) -> Vec<f64> {
        let mut out = vec![0.0; dictionary.dim()];
        for &(j, c) in &self.0 {
            axpy(c, dictionary.row(j), &mut out);
        }
        out
    }
}

/// Result of coding a single target vector.
#[derive(Debug, Clone)]
pub struct SparseCode {
    pub row: SparseRow,
    /// Atoms in the order they were selected.
    pub selection_order: Vec<usize>,
    /// 2-norm of the residual after 0, 1, ..., s selected atoms.
    pub residual_trace: Vec<f64>,
}

impl SparseCode {
    pub fn residual_norm(&self) -> f64 {
        *self.residual_trace.last().expect("trace starts with ‖v_t‖")
    }
}

/// Orthogonal matching pursuit against a fixed dictionary.
///
/// Picks `argmax |⟨atom, r⟩| / ‖atom‖` (ties toward the lowest index), refits
/// least squares on the support, and stops once the residual meets the
/// tolerance or `k` atoms are selected.
pub fn omp_sparse_code(
    target: &[f64],
    dictionary: &EmbeddingMatrix,
    cfg: &SparseCodeConfig,
) -> Result<SparseCode> {
    if dictionary.dim() != target.len() {
        return Err(SparseError::DimensionMismatch {
            expected: dictionary.dim(),
            actual: target.len(),
        });
    }
    cfg.validate(dictionary.rows())?;
    let atom_norms: Vec<f64> = dictionary.iter_rows().map(norm2).collect();
    omp_with_norms(target, dictionary, &atom_norms, cfg)
}

fn atom_norms_checked(dictionary: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let norms: Vec<f64> = dictionary.iter_rows().map(norm2).collect();
    let zero = norms.iter().filter(|&&n| n == 0.0).count();
    if zero == norms.len() {
        return Err(SparseError::AllZeroDictionary);
    }
    if zero > 0 {
        log::warn!("{zero} zero-norm dictionary rows skipped during atom selection");
    }
    Ok(norms)
}

fn omp_with_norms(
    target: &[f64],
    dictionary: &EmbeddingMatrix,
    atom_norms: &[f64],
    cfg: &SparseCodeConfig,
) -> Result<SparseCode> {
    if atom_norms.iter().all(|&n| n == 0.0) {
        return Err(SparseError::AllZeroDictionary);
    }
    let target_norm = norm2(target);
    let mut code = SparseCode {
        row: SparseRow::default(),
        selection_order: Vec::new(),
        residual_trace: vec![target_norm],
    };
    if target_norm == 0.0 {
        return Ok(code);
    }

    let threshold = cfg.threshold(target);
    let mut residual = target.to_vec();
    let mut qr = IncrementalQr::new();
    let mut qt_target = Vec::with_capacity(cfg.k);
    let mut in_support = vec![false; dictionary.rows()];

    while code.selection_order.len() < cfg.k {
        let rnorm = *code.residual_trace.last().unwrap();
        if cfg.norm.of(&residual) <= threshold || rnorm <= EXACT_RESIDUAL * target_norm {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for (j, atom) in dictionary.iter_rows().enumerate() {
            if atom_norms[j] == 0.0 || in_support[j] {
                continue;
            }
            let score = dot(atom, &residual).abs() / atom_norms[j];
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        let Some((j, score)) = best else { break };
        if score == 0.0 || !qr.push(dictionary.row(j)) {
            break;
        }
        let q = qr.q(qr.len() - 1);
        let proj = dot(q, &residual);
        qt_target.push(dot(q, target));
        axpy(-proj, q, &mut residual);
        in_support[j] = true;
        code.selection_order.push(j);
        let next = norm2(&residual);
        debug_assert!(
            next <= rnorm * (1.0 + 1e-12) + 1e-15,
            "OMP residual increased"
        );
        code.residual_trace.push(next);
    }

    let coeffs = qr.solve_r(&qt_target);
    code.row = SparseRow::new(code.selection_order.iter().copied().zip(coeffs).collect());
    debug_assert!(code.row.nnz() <= cfg.k, "OMP exceeded the sparsity bound");
    Ok(code)
}

/// Row-sparse coefficient map Θ (target rows × source columns).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMap {
    pub target_rows: usize,
    pub source_cols: usize,
    pub rows: Vec<SparseRow>,
    pub k_max: usize,
    pub dictionary_hash: String,
}

impl CoefficientMap {
    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.target_rows {
            return Err(SparseError::InvalidMap(format!(
                "{} rows stored, {} declared",
                self.rows.len(),
                self.target_rows
            )));
        }
        for (t, row) in self.rows.iter().enumerate() {
            if row.nnz() > self.k_max {
                return Err(SparseError::InvalidMap(format!(
                    "row {t} has {} nonzeros, bound is {}",
                    row.nnz(),
                    self.k_max
                )));
            }
            for w in row.entries().windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(SparseError::InvalidMap(format!(
                        "row {t} repeats source id {}",
                        w[0].0
                    )));
                }
            }
            for &(j, c) in row.entries() {
                if j >= self.source_cols || !c.is_finite() {
                    return Err(SparseError::InvalidMap(format!(
                        "row {t} entry ({j}, {c}) out of range or non-finite"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(SparseRow::nnz).sum()
    }

    pub fn max_row_nnz(&self) -> usize {
        self.rows.iter().map(SparseRow::nnz).max().unwrap_or(0)
    }

    pub fn check_dictionary(&self, dictionary: &EmbeddingMatrix) -> Result<()> {
        let actual = dictionary.content_hash();
        if self.dictionary_hash != actual {
            return Err(SparseError::HashMismatch {
                expected: self.dictionary_hash.clone(),
                actual: actual.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_dense(&self) -> DenseTheta {
        let mut data = vec![0.0; self.target_rows * self.source_cols];
        for (t, row) in self.rows.iter().enumerate() {
            for &(j, c) in row.entries() {
                data[t * self.source_cols + j] = c;
            }
        }
        DenseTheta {
            rows: self.target_rows,
            cols: self.source_cols,
            data,
            dictionary_hash: self.dictionary_hash.clone(),
        }
    }

    /// Θ export: header plus `target\tsource\tcoefficient` triplets.
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "#dictionary_hash={} k={}\n",
            self.dictionary_hash, self.k_max
        );
        for (t, row) in self.rows.iter().enumerate() {
            for &(j, c) in row.entries() {
                writeln!(out, "{t}\t{j}\t{c:.16e}").unwrap();
            }
        }
        out
    }

    /// Parses a Θ export. The shape comes from the paired vocabularies
    /// because trailing empty rows leave no trace in the file.
    pub fn from_tsv(text: &str, target_rows: usize, source_cols: usize) -> Result<Self> {
        let tsv_err = |line: usize, reason: String| SparseError::Tsv { line, reason };
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| tsv_err(1, "empty file".into()))?;
        let rest = header
            .strip_prefix("#dictionary_hash=")
            .ok_or_else(|| tsv_err(1, "header must start with #dictionary_hash=".into()))?;
        let (hash, k) = rest
            .split_once(" k=")
            .ok_or_else(|| tsv_err(1, "header missing k=".into()))?;
        if hash.is_empty() || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(tsv_err(1, format!("dictionary hash {hash:?} is not hex")));
        }
        let k_max: usize = k
            .parse()
            .map_err(|_| tsv_err(1, format!("k {k:?} is not an integer")))?;

        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); target_rows];
        let mut last: Option<(usize, usize)> = None;
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let mut fields = line.split('\t');
            let (Some(t), Some(j), Some(c), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(tsv_err(line_no, "expected 3 tab-separated fields".into()));
            };
            let t: usize = t
                .parse()
                .map_err(|_| tsv_err(line_no, format!("bad target id {t:?}")))?;
            let j: usize = j
                .parse()
                .map_err(|_| tsv_err(line_no, format!("bad source id {j:?}")))?;
            let c: f64 = c
                .parse()
                .map_err(|_| tsv_err(line_no, format!("bad coefficient {c:?}")))?;
            if t >= target_rows || j >= source_cols {
                return Err(tsv_err(
                    line_no,
                    format!("entry ({t}, {j}) outside {target_rows}x{source_cols}"),
                ));
            }
            if last.is_some_and(|prev| prev >= (t, j)) {
                return Err(tsv_err(
                    line_no,
                    "entries not sorted by (target, source)".into(),
                ));
            }
            last = Some((t, j));
            rows[t].push((j, c));
        }
        let map = Self {
            target_rows,
            source_cols,
            rows: rows.into_iter().map(SparseRow::new).collect(),
            k_max,
            dictionary_hash: hash.to_string(),
        };
        map.validate()?;
        Ok(map)
    }
}

/// Dense a×b coefficients, the state of Θ right after a full gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTheta {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub dictionary_hash: String,
}

impl DenseTheta {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|c| **c != 0.0).count()
    }
}

impl From<&CoefficientMap> for DenseTheta {
    fn from(map: &CoefficientMap) -> Self {
        map.to_dense()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodingReport {
    /// `‖V_T − Θ·V_S‖_F` against the rows that were coded.
    pub frobenius_residual: f64,
    pub passes: usize,
}

fn check_dims(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(SparseError::DimensionMismatch {
            expected: b.dim(),
            actual: a.dim(),
        });
    }
    Ok(())
}

/// Codes every row of `targets` against `dictionary`.
///
/// Rows are independent and coded in parallel; output order follows row order.
/// With a fixed dictionary each pass is a pure function of its input, so the
/// pass loop stops at the first pass that reproduces the previous one.
pub fn sparse_code_all(
    targets: &EmbeddingMatrix,
    dictionary: &EmbeddingMatrix,
    cfg: &SparseCodeConfig,
) -> Result<(CoefficientMap, CodingReport)> {
    check_dims(targets, dictionary)?;
    cfg.validate(dictionary.rows())?;
    let norms = atom_norms_checked(dictionary)?;

    let code_pass = || -> Result<Vec<SparseRow>> {
        (0..targets.rows())
            .into_par_iter()
            .map(|t| omp_with_norms(targets.row(t), dictionary, &norms, cfg).map(|c| c.row))
            .collect()
    };
    let mut rows = code_pass()?;
    let mut passes = 1;
    while passes < cfg.max_inner_iters {
        let next = code_pass()?;
        passes += 1;
        if next == rows {
            break;
        }
        rows = next;
    }

    let map = CoefficientMap {
        target_rows: targets.rows(),
        source_cols: dictionary.rows(),
        rows,
        k_max: cfg.k,
        dictionary_hash: dictionary.content_hash().to_string(),
    };
    let frobenius_residual = frobenius_diff(&map, dictionary, targets);
    Ok((
        map,
        CodingReport {
            frobenius_residual,
            passes,
        },
    ))
}

fn top_k_support(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| row[j] != 0.0).collect();
    // Stable sort keeps lower ids first among equal magnitudes.
    idx.sort_by(|&a, &b| row[b].abs().total_cmp(&row[a].abs()));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn reproject_row(dense: &[f64], dictionary: &EmbeddingMatrix, k: usize) -> SparseRow {
    let nonzero: Vec<(usize, f64)> = dense
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(j, c)| (j, *c))
        .collect();
    if nonzero.len() <= k {
        // Already k-sparse: the row reproduces its own target exactly.
        return SparseRow::new(nonzero);
    }
    let mut target = vec![0.0; dictionary.dim()];
    for &(j, c) in &nonzero {
        axpy(c, dictionary.row(j), &mut target);
    }
    let support = top_k_support(dense, k);
    let cols: Vec<&[f64]> = support.iter().map(|&j| dictionary.row(j)).collect();
    let coeffs = least_squares(&cols, &target);
    SparseRow::new(
        support
            .into_iter()
            .zip(coeffs)
            .filter(|(_, c)| *c != 0.0)
            .collect(),
    )
}

/// Restores per-row k-sparsity after a dense update.
///
/// Each row keeps its `k` largest-magnitude coefficients, refit by least
/// squares against the row's own reconstruction `θ_t · V_S`. Returns the
/// sparse map and `‖dense·V_S − sparse·V_S‖_F`.
pub fn reproject(
    dense: &DenseTheta,
    dictionary: &EmbeddingMatrix,
    cfg: &SparseCodeConfig,
) -> Result<(CoefficientMap, CodingReport)> {
    let actual = dictionary.content_hash();
    if dense.dictionary_hash != actual {
        return Err(SparseError::HashMismatch {
            expected: dense.dictionary_hash.clone(),
            actual: actual.to_string(),
        });
    }
    if dense.cols != dictionary.rows() {
        return Err(SparseError::DimensionMismatch {
            expected: dictionary.rows(),
            actual: dense.cols,
        });
    }
    cfg.validate(dictionary.rows())?;

    // One pass suffices: every output row is k-sparse, and a k-sparse row
    // is its own projection, so further passes are no-ops.
    let rows: Vec<SparseRow> = (0..dense.rows)
        .into_par_iter()
        .map(|t| reproject_row(dense.row(t), dictionary, cfg.k))
        .collect();
    let passes = 1;

    let map = CoefficientMap {
        target_rows: dense.rows,
        source_cols: dense.cols,
        rows,
        k_max: cfg.k,
        dictionary_hash: dense.dictionary_hash.clone(),
    };
    let mut sq = 0.0;
    for (t, row) in map.rows.iter().enumerate() {
        let mut before = vec![0.0; dictionary.dim()];
        for (j, &c) in dense.row(t).iter().enumerate() {
            if c != 0.0 {
                axpy(c, dictionary.row(j), &mut before);
            }
        }
        let after = row.combine(dictionary);
        sq += before
            .iter()
            .zip(&after)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok((
        map,
        CodingReport {
            frobenius_residual: sq.sqrt(),
            passes,
        },
    ))
}

/// `Θ · V_S`
pub fn reconstruct(
    theta: &CoefficientMap,
    dictionary: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix> {
    theta.check_dictionary(dictionary)?;
    Ok(reconstruct_unchecked(theta, dictionary))
}

pub(crate) fn reconstruct_unchecked(
    theta: &CoefficientMap,
    dictionary: &EmbeddingMatrix,
) -> EmbeddingMatrix {
    let mut data = Vec::with_capacity(theta.target_rows * dictionary.dim());
    for row in &theta.rows {
        data.extend(row.combine(dictionary));
    }
    EmbeddingMatrix::new(theta.target_rows, dictionary.dim(), data)
        .expect("combination of finite rows is finite")
}

fn frobenius_diff(
    theta: &CoefficientMap,
    dictionary: &EmbeddingMatrix,
    targets: &EmbeddingMatrix,
) -> f64 {
    theta
        .rows
        .iter()
        .enumerate()
        .map(|(t, row)| {
            row.combine(dictionary)
                .iter()
                .zip(targets.row(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// `‖V_T − Θ·V_S‖_F`
pub fn reconstruction_error(
    theta: &CoefficientMap,
    dictionary: &EmbeddingMatrix,
    targets: &EmbeddingMatrix,
) -> Result<f64> {
    check_dims(targets, dictionary)?;
    if targets.rows() != theta.target_rows {
        return Err(SparseError::DimensionMismatch {
            expected: theta.target_rows,
            actual: targets.rows(),
        });
    }
    theta.check_dictionary(dictionary)?;
    Ok(frobenius_diff(theta, dictionary, targets))
}

/// `‖V_T − Θ·V_S‖²_F`
pub fn reconstruction_error_squared(
    theta: &CoefficientMap,
    dictionary: &EmbeddingMatrix,
    targets: &EmbeddingMatrix,
) -> Result<f64> {
    reconstruction_error(theta, dictionary, targets).map(|e| e * e)
}

/// `‖V_T − Θ·V_S‖_F / ‖V_T‖_F` (0 when `V_T` is zero and reconstructed exactly).
pub fn relative_reconstruction_error(
    theta: &CoefficientMap,
    dictionary: &EmbeddingMatrix,
    targets: &EmbeddingMatrix,
) -> Result<f64> {
    let err = reconstruction_error(theta, dictionary, targets)?;
    let scale = norm2(targets.data());
    Ok(if scale == 0.0 { err } else { err / scale })
}
