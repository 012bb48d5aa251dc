//! Protein front end: dataset ingestion, tokenization, global alignment and
//! the distance analyses comparing evolutionary and embedding geometry.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{EmbeddingMatrix, AMINO_ACIDS, PAD_ID};
use crate::evaluation::{spearman_rho, EvalError};
use crate::frozen_model::{EmbeddedBatch, FrozenClassifier, ModelError};
use crate::sparse_map::{reconstruct, CoefficientMap, SparseError};

const BLOSUM62_TEXT: &str = include_str!("../data/blosum62.txt");
pub const DEFAULT_GAP_PENALTY: i32 = -4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowRejection {
    pub line: u64,
    pub reason: String,
}

impl fmt::Display for RowRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum BioError {
    #[error("{} row(s) rejected: {}", .0.len(), .0.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("; "))]
    Rejected(Vec<RowRejection>),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("unknown residue id {0}")]
    UnknownResidue(usize),
    #[error("invalid residue {residue:?} at position {position}")]
    InvalidResidue { residue: char, position: usize },
    #[error("substitution matrix: {0}")]
    Matrix(String),
    #[error("need at least {needed} sequences, got {got}")]
    TooFewSequences { needed: usize, got: usize },
    #[error("distance matrix is not symmetric with zero diagonal at ({0}, {1})")]
    NotDistanceMatrix(usize, usize),
    #[error("matrix shapes differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

pub type Result<T, E = BioError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "seqclass")]
    SequenceClassification,
    #[serde(rename = "tokclass")]
    TokenClassification,
    #[serde(rename = "regression")]
    Regression,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "seqclass" => Some(Self::SequenceClassification),
            "tokclass" => Some(Self::TokenClassification),
            "regression" => Some(Self::Regression),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SequenceClassification => "seqclass",
            Self::TokenClassification => "tokclass",
            Self::Regression => "regression",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    PerToken(Vec<usize>),
    Real(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub sequence: Vec<usize>,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResiduePolicy {
    /// Reject B, Z, X, U, O and anything else non-canonical.
    #[default]
    Strict,
    /// Map `X` to the padding token, reject other non-canonical letters.
    MapXToPad,
}

pub fn residue_id(c: char) -> Option<usize> {
    AMINO_ACIDS
        .iter()
        .position(|&a| a == c.to_ascii_uppercase())
}

pub fn tokenize(seq: &str, policy: ResiduePolicy) -> Result<Vec<usize>> {
    seq.chars()
        .enumerate()
        .map(|(position, c)| match (residue_id(c), policy) {
            (Some(id), _) => Ok(id),
            (None, ResiduePolicy::MapXToPad) if c.eq_ignore_ascii_case(&'X') => Ok(PAD_ID),
            _ => Err(BioError::InvalidResidue {
                residue: c,
                position,
            }),
        })
        .collect()
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| AMINO_ACIDS.get(i).copied().unwrap_or('X'))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Labeled target-domain sequences with a train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub items: Vec<Item>,
    pub kind: TaskKind,
    /// Class names for classification kinds; empty for regression.
    pub label_names: Vec<String>,
    pub split: Split,
}

impl TaskDataset {
    /// Builds a dataset with every item in the training split.
    pub fn new(items: Vec<Item>, kind: TaskKind, label_names: Vec<String>) -> Result<Self> {
        let n = items.len();
        let ds = Self {
            items,
            kind,
            label_names,
            split: Split {
                train: (0..n).collect(),
                test: Vec::new(),
            },
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BioError::InvalidDataset(msg));
        let n_classes = self.label_names.len();
        for (i, item) in self.items.iter().enumerate() {
            if let Some(&t) = item.sequence.iter().find(|&&t| t > PAD_ID) {
                return bad(format!("item {i} has token id {t}"));
            }
            match (&item.label, self.kind) {
                (Label::Class(c), TaskKind::SequenceClassification) if *c < n_classes => {}
                (Label::PerToken(ls), TaskKind::TokenClassification)
                    if ls.len() == item.sequence.len() && ls.iter().all(|&c| c < n_classes) => {}
                (Label::Real(y), TaskKind::Regression) if y.is_finite() => {}
                (label, kind) => {
                    return bad(format!("item {i} label {label:?} invalid for {kind:?}"))
                }
            }
        }
        let mut seen = vec![false; self.items.len()];
        for &i in self.split.train.iter().chain(&self.split.test) {
            if i >= seen.len() || seen[i] {
                return bad(format!("split index {i} out of range or repeated"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return bad("train and test splits do not cover every item".into());
        }
        Ok(())
    }

    /// Seeded shuffle into exact train/test sizes. Items beyond
    /// `train + test` (e.g. a validation split) are dropped.
    pub fn with_split_sizes(&self, train: usize, test: usize, seed: u64) -> Result<Self> {
        if train + test > self.items.len() || train == 0 {
            return Err(BioError::InvalidDataset(format!(
                "cannot split {} items into {train} train / {test} test",
                self.items.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let items = order[..train + test]
            .iter()
            .map(|&i| self.items[i].clone())
            .collect();
        let ds = Self {
            items,
            kind: self.kind,
            label_names: self.label_names.clone(),
            split: Split {
                train: (0..train).collect(),
                test: (train..train + test).collect(),
            },
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Seeded split keeping every item, `floor(fraction·n)` for training.
    pub fn with_train_fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        let train = (fraction * self.items.len() as f64).floor() as usize;
        self.with_split_sizes(train, self.items.len() - train, seed)
    }

    pub fn train_items(&self) -> impl Iterator<Item = &Item> {
        self.split.train.iter().map(|&i| &self.items[i])
    }

    pub fn test_items(&self) -> impl Iterator<Item = &Item> {
        self.split.test.iter().map(|&i| &self.items[i])
    }

    /// Restricts the training split to `train` (indices into `items`),
    /// keeping the test split.
    pub fn with_train_subset(&self, train: &[usize]) -> Self {
        let mut ds = self.clone();
        let keep: Vec<usize> = train.to_vec();
        // Items outside both splits are dropped so the split stays covering.
        let mut used: Vec<usize> = keep.iter().chain(&self.split.test).copied().collect();
        used.sort_unstable();
        let remap: std::collections::HashMap<usize, usize> = used
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new))
            .collect();
        ds.items = used.iter().map(|&i| self.items[i].clone()).collect();
        ds.split = Split {
            train: keep.iter().map(|i| remap[i]).collect(),
            test: self.split.test.iter().map(|i| remap[i]).collect(),
        };
        ds
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut split_of = vec!["train"; self.items.len()];
        for &i in &self.split.test {
            split_of[i] = "test";
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sequence", "label", "split"])?;
        for (item, split) in self.items.iter().zip(split_of) {
            let label = match &item.label {
                Label::Class(c) => self.label_names[*c].clone(),
                Label::PerToken(ls) => ls.iter().map(|&c| self.label_names[c].as_str()).collect(),
                Label::Real(y) => y.to_string(),
            };
            w.write_record([detokenize(&item.sequence), label, split.to_string()])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 csv"))
    }
}

/// Column selector for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Column {
    Name(String),
    Index(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub sequence_col: Column,
    pub label_col: Column,
    /// Optional `train`/`test` column; without it every row is training data.
    pub split_col: Option<Column>,
    pub kind: TaskKind,
    pub has_headers: bool,
    /// Fixes the class order; otherwise inferred from the data.
    pub label_names: Option<Vec<String>>,
    pub residues: ResiduePolicy,
}

impl CsvSchema {
    /// `sequence,label[,split]` with a header row.
    pub fn standard(kind: TaskKind) -> Self {
        Self {
            sequence_col: Column::Name("sequence".into()),
            label_col: Column::Name("label".into()),
            split_col: Some(Column::Name("split".into())),
            kind,
            has_headers: true,
            label_names: None,
            residues: ResiduePolicy::Strict,
        }
    }

    /// Headerless `sequence,label` rows.
    pub fn headerless(kind: TaskKind) -> Self {
        Self {
            sequence_col: Column::Index(0),
            label_col: Column::Index(1),
            split_col: None,
            has_headers: false,
            ..Self::standard(kind)
        }
    }
}

struct RawRow {
    line: u64,
    sequence: Vec<usize>,
    label: String,
    test: bool,
}

/// Class-name inference: all-integer labels keep their values as ids,
/// anything else is sorted lexicographically.
fn infer_label_names(raw: &[&str]) -> Vec<String> {
    if !raw.is_empty() && raw.iter().all(|l| l.parse::<usize>().is_ok()) {
        let max = raw
            .iter()
            .map(|l| l.parse::<usize>().unwrap())
            .max()
            .unwrap();
        return (0..=max).map(|i| i.to_string()).collect();
    }
    raw.iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(String::from)
        .collect()
}

fn class_id(names: &[String], label: &str) -> Option<usize> {
    names.iter().position(|n| n == label).or_else(|| {
        // Integer labels may be written as "01" etc.
        let v: usize = label.parse().ok()?;
        names
            .iter()
            .position(|n| n.parse::<usize>().ok() == Some(v))
    })
}

fn build_dataset(
    rows: Vec<RawRow>,
    kind: TaskKind,
    names: Option<Vec<String>>,
) -> Result<TaskDataset> {
    let mut rejections = Vec::new();
    let label_names = match kind {
        TaskKind::Regression => Vec::new(),
        TaskKind::SequenceClassification => names.unwrap_or_else(|| {
            infer_label_names(&rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>())
        }),
        TaskKind::TokenClassification => names.unwrap_or_else(|| {
            rows.iter()
                .flat_map(|r| r.label.chars())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .map(String::from)
                .collect()
        }),
    };

    let mut items = Vec::with_capacity(rows.len());
    let mut split = Split::default();
    for row in rows {
        let label = match kind {
            TaskKind::Regression => row
                .label
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|y| y.is_finite())
                .map(Label::Real),
            TaskKind::SequenceClassification => {
                class_id(&label_names, row.label.trim()).map(Label::Class)
            }
            TaskKind::TokenClassification => {
                let ids: Option<Vec<usize>> = row
                    .label
                    .chars()
                    .map(|c| {
                        label_names
                            .iter()
                            .position(|n| n.chars().eq(std::iter::once(c)))
                    })
                    .collect();
                match ids {
                    Some(ids) if ids.len() == row.sequence.len() => Some(Label::PerToken(ids)),
                    Some(ids) => {
                        rejections.push(RowRejection {
                            line: row.line,
                            reason: format!(
                                "{} per-token labels for {} residues",
                                ids.len(),
                                row.sequence.len()
                            ),
                        });
                        continue;
                    }
                    None => None,
                }
            }
        };
        let Some(label) = label else {
            rejections.push(RowRejection {
                line: row.line,
                reason: format!("cannot parse label {:?}", row.label),
            });
            continue;
        };
        let idx = items.len();
        if row.test {
            split.test.push(idx);
        } else {
            split.train.push(idx);
        }
        items.push(Item {
            sequence: row.sequence,
            label,
        });
    }
    if !rejections.is_empty() {
        return Err(BioError::Rejected(rejections));
    }
    let ds = TaskDataset {
        items,
        kind,
        label_names,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

fn resolve(col: &Column, headers: Option<&csv::StringRecord>) -> Result<usize> {
    match col {
        Column::Index(i) => Ok(*i),
        Column::Name(name) => headers
            .and_then(|h| h.iter().position(|f| f.trim() == name))
            .ok_or_else(|| BioError::MissingColumn(name.clone())),
    }
}

pub fn parse_csv_str(text: &str, schema: &CsvSchema) -> Result<TaskDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_headers)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = if schema.has_headers {
        Some(reader.headers()?.clone())
    } else {
        None
    };
    let seq_col = resolve(&schema.sequence_col, headers.as_ref())?;
    let label_col = resolve(&schema.label_col, headers.as_ref())?;
    let split_col = match &schema.split_col {
        // A missing optional split column means "all training".
        Some(c) => resolve(c, headers.as_ref()).ok(),
        None => None,
    };

    let mut rows = Vec::new();
    let mut rejections = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let (Some(seq), Some(label)) = (record.get(seq_col), record.get(label_col)) else {
            rejections.push(RowRejection {
                line,
                reason: format!("expected at least {} fields", seq_col.max(label_col) + 1),
            });
            continue;
        };
        let seq = seq.trim();
        if seq.is_empty() {
            rejections.push(RowRejection {
                line,
                reason: "empty sequence".into(),
            });
            continue;
        }
        let sequence = match tokenize(seq, schema.residues) {
            Ok(s) => s,
            Err(e) => {
                rejections.push(RowRejection {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let test = match split_col.and_then(|c| record.get(c)).map(str::trim) {
            None | Some("") | Some("train") => false,
            Some("test") => true,
            Some(other) => {
                rejections.push(RowRejection {
                    line,
                    reason: format!("split must be train or test, got {other:?}"),
                });
                continue;
            }
        };
        rows.push(RawRow {
            line,
            sequence,
            label: label.to_string(),
            test,
        });
    }
    if !rejections.is_empty() {
        return Err(BioError::Rejected(rejections));
    }
    build_dataset(rows, schema.kind, schema.label_names.clone())
}

pub fn parse_csv_dataset(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TaskDataset> {
    parse_csv_str(&read(path.as_ref())?, schema)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| BioError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Which `separator`-delimited header field carries the label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRule {
    pub separator: char,
    pub field: usize,
}

impl Default for LabelRule {
    /// `>id|label`
    fn default() -> Self {
        Self {
            separator: '|',
            field: 1,
        }
    }
}

pub fn parse_fasta_str(
    text: &str,
    rule: &LabelRule,
    kind: TaskKind,
    residues: ResiduePolicy,
) -> Result<TaskDataset> {
    let mut records: Vec<(u64, String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.trim_end();
        if let Some(header) = line.strip_prefix('>') {
            records.push((line_no, header.to_string(), String::new()));
        } else if !line.trim().is_empty() {
            match records.last_mut() {
                Some(rec) => rec.2.push_str(line.trim()),
                None => {
                    return Err(BioError::Rejected(vec![RowRejection {
                        line: line_no,
                        reason: "sequence data before the first header".into(),
                    }]))
                }
            }
        }
    }
    let mut rows = Vec::new();
    let mut rejections = Vec::new();
    for (line, header, seq) in records {
        let Some(label) = header.split(rule.separator).nth(rule.field) else {
            rejections.push(RowRejection {
                line,
                reason: format!("header {header:?} has no label field {}", rule.field),
            });
            continue;
        };
        if seq.is_empty() {
            rejections.push(RowRejection {
                line,
                reason: "empty sequence".into(),
            });
            continue;
        }
        match tokenize(&seq, residues) {
            Ok(sequence) => rows.push(RawRow {
                line,
                sequence,
                label: label.to_string(),
                test: false,
            }),
            Err(e) => rejections.push(RowRejection {
                line,
                reason: e.to_string(),
            }),
        }
    }
    if !rejections.is_empty() {
        return Err(BioError::Rejected(rejections));
    }
    build_dataset(rows, kind, None)
}

pub fn parse_fasta(
    path: impl AsRef<Path>,
    rule: &LabelRule,
    kind: TaskKind,
) -> Result<TaskDataset> {
    parse_fasta_str(&read(path.as_ref())?, rule, kind, ResiduePolicy::Strict)
}

/// 20×20 substitution scores over the canonical residue order, plus a
/// linear gap penalty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstitutionMatrix {
    pub scores: [[i32; 20]; 20],
    pub gap_penalty: i32,
}

impl SubstitutionMatrix {
    /// Parses an NCBI-style matrix (column header line, one row per letter).
    /// Letters outside the 20 canonical residues are ignored.
    pub fn from_ncbi_text(text: &str, gap_penalty: i32) -> Result<Self> {
        let mut lines = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header: Vec<char> = lines
            .next()
            .ok_or_else(|| BioError::Matrix("no header line".into()))?
            .split_whitespace()
            .filter_map(|t| t.chars().next())
            .collect();
        let mut scores = [[i32::MIN; 20]; 20];
        for line in lines {
            let mut fields = line.split_whitespace();
            let Some(row_letter) = fields.next().and_then(|f| f.chars().next()) else {
                continue;
            };
            let Some(r) = residue_id(row_letter) else {
                continue;
            };
            for (col_letter, value) in header.iter().zip(fields) {
                if let Some(c) = residue_id(*col_letter) {
                    scores[r][c] = value
                        .parse()
                        .map_err(|_| BioError::Matrix(format!("bad score {value:?}")))?;
                }
            }
        }
        for a in 0..20 {
            for b in 0..20 {
                if scores[a][b] == i32::MIN {
                    return Err(BioError::Matrix(format!(
                        "missing pair {}{}",
                        AMINO_ACIDS[a], AMINO_ACIDS[b]
                    )));
                }
                if scores[a][b] != scores[b][a] {
                    return Err(BioError::Matrix(format!(
                        "asymmetric pair {}{}",
                        AMINO_ACIDS[a], AMINO_ACIDS[b]
                    )));
                }
            }
        }
        Ok(Self {
            scores,
            gap_penalty,
        })
    }

    pub fn score(&self, a: usize, b: usize) -> i32 {
        self.scores[a][b]
    }
}

/// The shipped BLOSUM62 table with the default gap penalty.
pub fn blosum62() -> SubstitutionMatrix {
    SubstitutionMatrix::from_ncbi_text(BLOSUM62_TEXT, DEFAULT_GAP_PENALTY)
        .expect("shipped BLOSUM62 parses")
}

fn check_residues(seq: &[usize]) -> Result<()> {
    if seq.is_empty() {
        return Err(BioError::EmptySequence);
    }
    if let Some(&bad) = seq.iter().find(|&&r| r >= 20) {
        return Err(BioError::UnknownResidue(bad));
    }
    Ok(())
}

/// Optimal global alignment score with a linear gap penalty.
pub fn needleman_wunsch(a: &[usize], b: &[usize], m: &SubstitutionMatrix) -> Result<i64> {
    check_residues(a)?;
    check_residues(b)?;
    let gap = m.gap_penalty as i64;
    let mut prev: Vec<i64> = (0..=b.len() as i64).map(|j| j * gap).collect();
    let mut cur = vec![0i64; b.len() + 1];
    for (i, &ra) in a.iter().enumerate() {
        cur[0] = (i as i64 + 1) * gap;
        for (j, &rb) in b.iter().enumerate() {
            let diag = prev[j] + m.score(ra, rb) as i64;
            let up = prev[j + 1] + gap;
            let left = cur[j] + gap;
            cur[j + 1] = diag.max(up).max(left);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[b.len()])
}

/// Symmetric matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(BioError::ShapeMismatch(data.len(), n * n));
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(BioError::NotDistanceMatrix(i, i));
            }
            for j in i + 1..n {
                if data[i * n + j] != data[j * n + i] {
                    return Err(BioError::NotDistanceMatrix(i, j));
                }
            }
        }
        Ok(Self { n, data })
    }

    fn from_upper(n: usize, upper: &[f64]) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                data[i * n + j] = upper[k];
                data[j * n + i] = upper[k];
                k += 1;
            }
        }
        Self::new(n, data)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Strict upper triangle, row-major.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.n.saturating_sub(1) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push(self.get(i, j));
            }
        }
        out
    }

    /// Applies `f` to every off-diagonal entry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_upper(
            self.n,
            &self.upper_triangle().into_iter().map(f).collect::<Vec<_>>(),
        )
    }
}

fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

/// Score-to-distance conversion: `max(S(a,a), S(b,b)) − S(a,b)`, clamped at
/// zero, then divided by the largest entry so values lie in [0, 1].
fn normalized_score_distances(
    n: usize,
    self_scores: &[i64],
    pair_score: impl Fn(usize, usize) -> i64 + Sync,
) -> Result<DistanceMatrix> {
    let raw: Vec<f64> = upper_pairs(n)
        .into_par_iter()
        .map(|(i, j)| (self_scores[i].max(self_scores[j]) - pair_score(i, j)).max(0) as f64)
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    let norm: Vec<f64> = if max > 0.0 {
        raw.iter().map(|d| d / max).collect()
    } else {
        raw
    };
    DistanceMatrix::from_upper(n, &norm)
}

/// Pairwise evolutionary distances from global alignment scores.
pub fn evolutionary_distance_matrix(
    sequences: &[Vec<usize>],
    m: &SubstitutionMatrix,
) -> Result<DistanceMatrix> {
    if sequences.len() < 2 {
        return Err(BioError::TooFewSequences {
            needed: 2,
            got: sequences.len(),
        });
    }
    for s in sequences {
        check_residues(s)?;
    }
    let self_scores: Vec<i64> = sequences
        .iter()
        .map(|s| needleman_wunsch(s, s, m))
        .collect::<Result<_>>()?;
    normalized_score_distances(sequences.len(), &self_scores, |i, j| {
        needleman_wunsch(&sequences[i], &sequences[j], m).expect("residues checked")
    })
}

/// Residue-level distances from substitution scores alone (20×20).
pub fn residue_substitution_distances(m: &SubstitutionMatrix) -> DistanceMatrix {
    let self_scores: Vec<i64> = (0..20).map(|a| m.score(a, a) as i64).collect();
    normalized_score_distances(20, &self_scores, |a, b| m.score(a, b) as i64)
        .expect("substitution distances are symmetric")
}

fn euclidean_matrix(points: &[Vec<f64>]) -> Result<DistanceMatrix> {
    let upper: Vec<f64> = upper_pairs(points.len())
        .into_par_iter()
        .map(|(i, j)| {
            points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    DistanceMatrix::from_upper(points.len(), &upper)
}

/// Mean-pooled final-layer features of each sequence under the reprogrammed
/// embeddings `Θ·V_S`.
pub fn pooled_embeddings(
    theta: &CoefficientMap,
    dictionary: &EmbeddingMatrix,
    model: &FrozenClassifier,
    sequences: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let table = reconstruct(theta, dictionary)?;
    let refs: Vec<&[usize]> = sequences.iter().map(Vec::as_slice).collect();
    let batch = EmbeddedBatch::from_sequences(&refs, &table, PAD_ID);
    Ok(model.pooled_features(&batch)?)
}

pub fn embedding_distance_matrix(
    theta: &CoefficientMap,
    dictionary: &EmbeddingMatrix,
    model: &FrozenClassifier,
    sequences: &[Vec<usize>],
) -> Result<DistanceMatrix> {
    euclidean_matrix(&pooled_embeddings(theta, dictionary, model, sequences)?)
}

/// Euclidean distances between the 20 residue embeddings `Θ·V_S`.
pub fn residue_embedding_distances(
    theta: &CoefficientMap,
    dictionary: &EmbeddingMatrix,
) -> Result<DistanceMatrix> {
    let table = reconstruct(theta, dictionary)?;
    let points: Vec<Vec<f64>> = (0..20.min(table.rows()))
        .map(|r| table.row(r).to_vec())
        .collect();
    euclidean_matrix(&points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub rho: f64,
    /// `(i, j, evo, emb)` over the strict upper triangle.
    pub pairs: Vec<(usize, usize, f64, f64)>,
}

impl DistanceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,evo,emb\n");
        for (i, j, e, m) in &self.pairs {
            out.push_str(&format!("{i},{j},{e},{m}\n"));
        }
        out
    }
}

/// Spearman correlation between two distance matrices over their strict
/// upper triangles.
pub fn distance_correlation_report(
    evo: &DistanceMatrix,
    emb: &DistanceMatrix,
) -> Result<DistanceReport> {
    if evo.len() != emb.len() {
        return Err(BioError::ShapeMismatch(evo.len(), emb.len()));
    }
    let (e, m) = (evo.upper_triangle(), emb.upper_triangle());
    let rho = spearman_rho(&e, &m)?;
    let pairs = upper_pairs(evo.len())
        .into_iter()
        .zip(e.into_iter().zip(m))
        .map(|((i, j), (a, b))| (i, j, a, b))
        .collect();
    Ok(DistanceReport { rho, pairs })
}

pub fn pooled_embeddings_csv(ids: &[String], embeddings: &[Vec<f64>]) -> String {
    let width = embeddings.first().map_or(0, Vec::len);
    let mut out = String::from("id");
    for d in 0..width {
        out.push_str(&format!(",dim{d}"));
    }
    out.push('\n');
    for (id, e) in ids.iter().zip(embeddings) {
        out.push_str(id);
        for v in e {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
