//! The frozen source classifier: forward pass and exact input gradients.
//!
//! The encoder maps an embedded sequence (L×m) to per-position features
//! (L×h): an optional single self-attention block followed by a per-position
//! MLP. Sequence-level logits come from the affine head applied to the mean
//! of the unmasked features; token-level logits apply the head per position.
//!
//! Parameters are immutable once constructed. Gradients are hand-written
//! reverse mode.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embeddings::{sha256_hex, EmbeddingError, EmbeddingMatrix};
use crate::linalg::dot;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("missing model file {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest.json: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unknown encoder kind {0:?}")]
    UnknownEncoder(String),
    #[error("unknown activation {0:?}")]
    UnknownActivation(String),
    #[error("tensor {0:?} missing from manifest")]
    MissingTensor(String),
    #[error("tensor {tensor:?}: expected shape {expected:?}, found {found:?} in {source_of}")]
    ShapeMismatch {
        tensor: String,
        expected: (usize, usize),
        found: (usize, usize),
        source_of: &'static str,
    },
    #[error("tensor {0:?}: blob sha256 does not match manifest")]
    BlobHash(String),
    #[error("tensor blob: {0}")]
    Blob(#[from] EmbeddingError),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("frozen parameters changed: hash {before} became {after}")]
    ParametersMutated { before: String, after: String },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            other => Err(ModelError::UnknownActivation(other.into())),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Tanh => "tanh",
            Self::Relu => "relu",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Tanh => x.tanh(),
            Self::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - out * out,
            Self::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Affine map `y = x·W + b` with `W` stored input-major (inputs × outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != inputs * outputs || bias.len() != outputs {
            return Err(ModelError::InvalidArchitecture(format!(
                "dense {inputs}x{outputs} given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            weight,
            bias,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let w = &self.weight[i * self.outputs..(i + 1) * self.outputs];
            for (yo, wo) in y.iter_mut().zip(w) {
                *yo += xi * wo;
            }
        }
        y
    }

    /// `dx = W · dy`
    pub fn backward_input(&self, dy: &[f64]) -> Vec<f64> {
        (0..self.inputs)
            .map(|i| dot(&self.weight[i * self.outputs..(i + 1) * self.outputs], dy))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Single-layer multi-head softmax self-attention with a residual connection
/// and sinusoidal position encodings added to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub heads: usize,
    pub head_dim: usize,
    /// m × (heads·head_dim)
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    /// (heads·head_dim) × m
    pub wo: Vec<f64>,
}

impl AttentionBlock {
    fn inner(&self) -> usize {
        self.heads * self.head_dim
    }
}

pub fn sinusoidal_position(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// `out[r] = Σ_i x[r,i] · w[i,c]` for an (n×a)·(a×b) product.
fn matmul(x: &[f64], n: usize, a: usize, w: &[f64], b: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * b];
    for r in 0..n {
        let orow = &mut out[r * b..(r + 1) * b];
        for i in 0..a {
            let xi = x[r * a + i];
            if xi == 0.0 {
                continue;
            }
            for (o, wv) in orow.iter_mut().zip(&w[i * b..(i + 1) * b]) {
                *o += xi * wv;
            }
        }
    }
    out
}

/// `x · wᵀ` for x (n×b), w (a×b) → (n×a)
fn matmul_t(x: &[f64], n: usize, b: usize, w: &[f64], a: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * a];
    for r in 0..n {
        for i in 0..a {
            out[r * a + i] = dot(&x[r * b..(r + 1) * b], &w[i * b..(i + 1) * b]);
        }
    }
    out
}

/// A batch of embedded sequences, padded to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedBatch {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    /// batch × len × dim, zeros at masked positions
    pub data: Vec<f64>,
    /// batch × len, true for real tokens
    pub mask: Vec<bool>,
    /// batch × len target-token ids
    pub token_ids: Vec<usize>,
}

impl EmbeddedBatch {
    /// Looks each token up in `table` (rows = target tokens) and pads with
    /// `pad_id` to the longest sequence.
    pub fn from_sequences(seqs: &[&[usize]], table: &EmbeddingMatrix, pad_id: usize) -> Self {
        let batch = seqs.len();
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let dim = table.dim();
        let mut data = vec![0.0; batch * len * dim];
        let mut mask = vec![false; batch * len];
        let mut token_ids = vec![pad_id; batch * len];
        for (b, seq) in seqs.iter().enumerate() {
            for (l, &tok) in seq.iter().enumerate() {
                let at = b * len + l;
                token_ids[at] = tok;
                if tok == pad_id {
                    continue;
                }
                mask[at] = true;
                data[at * dim..(at + 1) * dim].copy_from_slice(table.row(tok));
            }
        }
        Self {
            batch,
            len,
            dim,
            data,
            mask,
            token_ids,
        }
    }

    pub fn sequence(&self, b: usize) -> (&[f64], &[bool]) {
        let l = self.len;
        (
            &self.data[b * l * self.dim..(b + 1) * l * self.dim],
            &self.mask[b * l..(b + 1) * l],
        )
    }
}

/// Forward outputs for a whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub n_classes: usize,
    /// batch × n_classes
    pub pooled: Vec<f64>,
    /// batch × len × n_classes, zeros at masked positions
    pub per_token: Vec<f64>,
}

/// Gradient of a scalar loss with respect to the logits.
#[derive(Debug, Clone, Copy)]
pub enum OutputGrad<'a> {
    /// batch × n_classes, against pooled logits
    Pooled(&'a [f64]),
    /// batch × len × n_classes, against per-token logits
    PerToken(&'a [f64]),
}

/// Gradient against a single sequence's logits.
#[derive(Debug, Clone, Copy)]
pub enum SequenceGrad<'a> {
    Pooled(&'a [f64]),
    PerToken(&'a [f64]),
}

#[derive(Debug, Clone)]
struct AttentionTrace {
    z: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × L × L attention weights (zero rows for masked queries)
    probs: Vec<f64>,
    concat: Vec<f64>,
}

/// Intermediate values of one sequence's forward pass.
#[derive(Debug, Clone)]
pub struct SequenceTrace {
    len: usize,
    mask: Vec<bool>,
    count: usize,
    attention: Option<AttentionTrace>,
    /// Per layer: inputs (L × in) and pre-activations / outputs (L × out).
    layer_inputs: Vec<Vec<f64>>,
    layer_pre: Vec<Vec<f64>>,
    features: Vec<f64>,
    pooled_features: Vec<f64>,
    pooled_logits: Vec<f64>,
    token_logits: Vec<f64>,
}

impl SequenceTrace {
    pub fn pooled_logits(&self) -> &[f64] {
        &self.pooled_logits
    }

    pub fn token_logits(&self) -> &[f64] {
        &self.token_logits
    }

    pub fn pooled_features(&self) -> &[f64] {
        &self.pooled_features
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn unmasked(&self) -> usize {
        self.count
    }
}

/// Gradients of the MLP and head parameters; used to fit source fixtures
/// before they are frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    pub head: (Vec<f64>, Vec<f64>),
}

impl ParamGrads {
    pub fn zeros_like(model: &FrozenClassifier) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|d| (vec![0.0; d.weight.len()], vec![0.0; d.bias.len()]))
                .collect(),
            head: (
                vec![0.0; model.head.weight.len()],
                vec![0.0; model.head.bias.len()],
            ),
        }
    }
}

fn outer_acc(x: &[f64], dy: &[f64], gw: &mut [f64], gb: &mut [f64]) {
    let out = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (g, d) in gw[i * out..(i + 1) * out].iter_mut().zip(dy) {
            *g += xi * d;
        }
    }
    for (g, d) in gb.iter_mut().zip(dy) {
        *g += d;
    }
}

#[derive(Debug, Clone)]
pub struct FrozenClassifier {
    dim: usize,
    n_classes: usize,
    activation: Activation,
    attention: Option<AttentionBlock>,
    layers: Vec<Dense>,
    head: Dense,
    param_hash: String,
}

impl PartialEq for FrozenClassifier {
    fn eq(&self, other: &Self) -> bool {
        self.param_hash == other.param_hash
    }
}

impl FrozenClassifier {
    /// Validates shapes and computes the parameter hash.
    pub fn new(
        dim: usize,
        activation: Activation,
        attention: Option<AttentionBlock>,
        layers: Vec<Dense>,
        head: Dense,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(ModelError::InvalidArchitecture("dim must be >= 1".into()));
        }
        if layers.len() > 3 {
            return Err(ModelError::InvalidArchitecture(format!(
                "at most 3 hidden layers supported, got {}",
                layers.len()
            )));
        }
        if let Some(a) = &attention {
            if a.heads == 0 || a.head_dim == 0 {
                return Err(ModelError::InvalidArchitecture(
                    "attention needs at least one head of nonzero width".into(),
                ));
            }
            let inner = a.inner();
            for (name, w) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                if w.len() != dim * inner {
                    return Err(ModelError::InvalidArchitecture(format!(
                        "attention {name} has {} values, expected {}",
                        w.len(),
                        dim * inner
                    )));
                }
            }
        }
        let mut width = dim;
        for (i, l) in layers.iter().enumerate() {
            if l.inputs != width {
                return Err(ModelError::InvalidArchitecture(format!(
                    "layer {i} expects {} inputs, previous width is {width}",
                    l.inputs
                )));
            }
            width = l.outputs;
        }
        if head.inputs != width {
            return Err(ModelError::InvalidArchitecture(format!(
                "head expects {} inputs, encoder width is {width}",
                head.inputs
            )));
        }
        if head.outputs == 0 {
            return Err(ModelError::InvalidArchitecture(
                "head has no classes".into(),
            ));
        }
        let mut model = Self {
            dim,
            n_classes: head.outputs,
            activation,
            attention,
            layers,
            head,
            param_hash: String::new(),
        };
        if model
            .named_tensors()
            .iter()
            .any(|t| t.values.iter().any(|v| !v.is_finite()))
        {
            return Err(ModelError::InvalidArchitecture(
                "non-finite parameter".into(),
            ));
        }
        model.param_hash = model.compute_param_hash();
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn attention(&self) -> Option<&AttentionBlock> {
        self.attention.as_ref()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(self.dim, |l| l.outputs)
    }

    pub fn param_hash(&self) -> &str {
        &self.param_hash
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|t| t.values.len()).sum()
    }

    pub fn encoder_kind(&self) -> &'static str {
        if self.attention.is_some() {
            "attention"
        } else {
            "mean_pool_mlp"
        }
    }

    /// Recomputes the content hash from the live parameters.
    pub fn compute_param_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in self.named_tensors() {
            h.update(t.name.as_bytes());
            h.update((t.shape.0 as u64).to_le_bytes());
            h.update((t.shape.1 as u64).to_le_bytes());
            for v in t.values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Errors if the parameters no longer match the hash taken at construction.
    pub fn verify_frozen(&self) -> Result<()> {
        let now = self.compute_param_hash();
        if now != self.param_hash {
            return Err(ModelError::ParametersMutated {
                before: self.param_hash.clone(),
                after: now,
            });
        }
        Ok(())
    }

    fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        if let Some(a) = &self.attention {
            let inner = a.inner();
            out.push(NamedTensor::new("attn.wq", (self.dim, inner), &a.wq));
            out.push(NamedTensor::new("attn.wk", (self.dim, inner), &a.wk));
            out.push(NamedTensor::new("attn.wv", (self.dim, inner), &a.wv));
            out.push(NamedTensor::new("attn.wo", (inner, self.dim), &a.wo));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push(NamedTensor::owned(
                format!("layer{i}.weight"),
                (l.inputs, l.outputs),
                &l.weight,
            ));
            out.push(NamedTensor::owned(
                format!("layer{i}.bias"),
                (1, l.outputs),
                &l.bias,
            ));
        }
        out.push(NamedTensor::new(
            "head.weight",
            (self.head.inputs, self.head.outputs),
            &self.head.weight,
        ));
        out.push(NamedTensor::new(
            "head.bias",
            (1, self.head.outputs),
            &self.head.bias,
        ));
        out
    }

    /// Forward pass for one sequence (`x` is L×m, zeros at masked positions).
    pub fn forward_sequence(&self, x: &[f64], mask: &[bool]) -> Result<SequenceTrace> {
        let len = mask.len();
        if x.len() != len * self.dim {
            return Err(ModelError::DimensionMismatch {
                expected: len * self.dim,
                actual: x.len(),
            });
        }
        let m = self.dim;
        let count = mask.iter().filter(|&&b| b).count();

        let (attention, mut h) = match &self.attention {
            None => (None, x.to_vec()),
            Some(a) => {
                let t = self.attention_forward(a, x, mask);
                let mut y = t.z.clone();
                let proj = matmul(&t.concat, len, a.inner(), &a.wo, m);
                for (l, keep) in mask.iter().enumerate() {
                    let row = &mut y[l * m..(l + 1) * m];
                    if *keep {
                        for (yi, pi) in row.iter_mut().zip(&proj[l * m..(l + 1) * m]) {
                            *yi += pi;
                        }
                    } else {
                        row.fill(0.0);
                    }
                }
                (Some(t), y)
            }
        };

        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut layer_pre = Vec::with_capacity(self.layers.len());
        let mut width = m;
        for layer in &self.layers {
            let mut pre = vec![0.0; len * layer.outputs];
            let mut out = vec![0.0; len * layer.outputs];
            for l in (0..len).filter(|&l| mask[l]) {
                let p = layer.forward(&h[l * width..(l + 1) * width]);
                for (o, (po, oo)) in p.iter().zip(
                    pre[l * layer.outputs..(l + 1) * layer.outputs]
                        .iter_mut()
                        .zip(&mut out[l * layer.outputs..(l + 1) * layer.outputs]),
                ) {
                    *po = *o;
                    *oo = self.activation.apply(*o);
                }
            }
            layer_inputs.push(std::mem::replace(&mut h, out));
            layer_pre.push(pre);
            width = layer.outputs;
        }

        let mut pooled_features = vec![0.0; width];
        let n = self.n_classes;
        let mut token_logits = vec![0.0; len * n];
        for l in (0..len).filter(|&l| mask[l]) {
            let f = &h[l * width..(l + 1) * width];
            for (p, v) in pooled_features.iter_mut().zip(f) {
                *p += v;
            }
            token_logits[l * n..(l + 1) * n].copy_from_slice(&self.head.forward(f));
        }
        if count > 0 {
            pooled_features.iter_mut().for_each(|p| *p /= count as f64);
        }
        let pooled_logits = self.head.forward(&pooled_features);

        Ok(SequenceTrace {
            len,
            mask: mask.to_vec(),
            count,
            attention,
            layer_inputs,
            layer_pre,
            features: h,
            pooled_features,
            pooled_logits,
            token_logits,
        })
    }

    fn attention_forward(&self, a: &AttentionBlock, x: &[f64], mask: &[bool]) -> AttentionTrace {
        let len = mask.len();
        let m = self.dim;
        let inner = a.inner();
        let d = a.head_dim;
        let mut z = x.to_vec();
        for l in (0..len).filter(|&l| mask[l]) {
            for (zi, pi) in z[l * m..(l + 1) * m]
                .iter_mut()
                .zip(sinusoidal_position(l, m))
            {
                *zi += pi;
            }
        }
        let q = matmul(&z, len, m, &a.wq, inner);
        let k = matmul(&z, len, m, &a.wk, inner);
        let v = matmul(&z, len, m, &a.wv, inner);
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; a.heads * len * len];
        let mut concat = vec![0.0; len * inner];
        for h in 0..a.heads {
            let off = h * d;
            for i in (0..len).filter(|&i| mask[i]) {
                let qi = &q[i * inner + off..i * inner + off + d];
                let row = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
                let mut max = f64::NEG_INFINITY;
                for j in (0..len).filter(|&j| mask[j]) {
                    row[j] = scale * dot(qi, &k[j * inner + off..j * inner + off + d]);
                    max = max.max(row[j]);
                }
                let mut sum = 0.0;
                for j in (0..len).filter(|&j| mask[j]) {
                    row[j] = (row[j] - max).exp();
                    sum += row[j];
                }
                for j in (0..len).filter(|&j| mask[j]) {
                    row[j] /= sum;
                    let w = row[j];
                    for c in 0..d {
                        concat[i * inner + off + c] += w * v[j * inner + off + c];
                    }
                }
            }
        }
        AttentionTrace {
            z,
            q,
            k,
            v,
            probs,
            concat,
        }
    }

    /// Reverse pass for one sequence. Returns dLoss/dx (L×m); when `params`
    /// is given, MLP and head parameter gradients are accumulated into it.
    pub fn backward_sequence(
        &self,
        trace: &SequenceTrace,
        grad: SequenceGrad<'_>,
        mut params: Option<&mut ParamGrads>,
    ) -> Result<Vec<f64>> {
        let len = trace.len;
        let n = self.n_classes;
        let width = self.feature_dim();
        let mut dh = vec![0.0; len * width];
        match grad {
            SequenceGrad::Pooled(g) => {
                if g.len() != n {
                    return Err(ModelError::DimensionMismatch {
                        expected: n,
                        actual: g.len(),
                    });
                }
                if let Some(p) = params.as_deref_mut() {
                    outer_acc(&trace.pooled_features, g, &mut p.head.0, &mut p.head.1);
                }
                if trace.count > 0 {
                    let dp = self.head.backward_input(g);
                    let inv = 1.0 / trace.count as f64;
                    for l in (0..len).filter(|&l| trace.mask[l]) {
                        for (d, v) in dh[l * width..(l + 1) * width].iter_mut().zip(&dp) {
                            *d = v * inv;
                        }
                    }
                }
            }
            SequenceGrad::PerToken(g) => {
                if g.len() != len * n {
                    return Err(ModelError::DimensionMismatch {
                        expected: len * n,
                        actual: g.len(),
                    });
                }
                for l in (0..len).filter(|&l| trace.mask[l]) {
                    let gl = &g[l * n..(l + 1) * n];
                    if let Some(p) = params.as_deref_mut() {
                        outer_acc(
                            &trace.features[l * width..(l + 1) * width],
                            gl,
                            &mut p.head.0,
                            &mut p.head.1,
                        );
                    }
                    dh[l * width..(l + 1) * width].copy_from_slice(&self.head.backward_input(gl));
                }
            }
        }

        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.layer_inputs[idx];
            let pre = &trace.layer_pre[idx];
            let out_w = layer.outputs;
            let in_w = layer.inputs;
            let out_vals: &[f64] = if idx + 1 < self.layers.len() {
                &trace.layer_inputs[idx + 1]
            } else {
                &trace.features
            };
            let mut dprev = vec![0.0; len * in_w];
            for l in (0..len).filter(|&l| trace.mask[l]) {
                let dpre: Vec<f64> = (0..out_w)
                    .map(|o| {
                        let at = l * out_w + o;
                        dh[at] * self.activation.derivative(pre[at], out_vals[at])
                    })
                    .collect();
                if let Some(p) = params.as_deref_mut() {
                    let (gw, gb) = &mut p.layers[idx];
                    outer_acc(&input[l * in_w..(l + 1) * in_w], &dpre, gw, gb);
                }
                dprev[l * in_w..(l + 1) * in_w].copy_from_slice(&layer.backward_input(&dpre));
            }
            dh = dprev;
        }

        if let (Some(a), Some(t)) = (&self.attention, &trace.attention) {
            dh = self.attention_backward(a, t, &trace.mask, &dh);
        }
        for l in (0..len).filter(|&l| !trace.mask[l]) {
            dh[l * self.dim..(l + 1) * self.dim].fill(0.0);
        }
        Ok(dh)
    }

    fn attention_backward(
        &self,
        a: &AttentionBlock,
        t: &AttentionTrace,
        mask: &[bool],
        dy: &[f64],
    ) -> Vec<f64> {
        let len = mask.len();
        let m = self.dim;
        let inner = a.inner();
        let d = a.head_dim;
        let scale = 1.0 / (d as f64).sqrt();
        // y = z + concat·Wo at unmasked rows.
        let mut dz = dy.to_vec();
        let dconcat = matmul_t(dy, len, m, &a.wo, inner);
        let mut dq = vec![0.0; len * inner];
        let mut dk = vec![0.0; len * inner];
        let mut dv = vec![0.0; len * inner];
        for h in 0..a.heads {
            let off = h * d;
            for i in (0..len).filter(|&i| mask[i]) {
                let p = &t.probs[(h * len + i) * len..(h * len + i + 1) * len];
                let dout = &dconcat[i * inner + off..i * inner + off + d];
                let mut dp = vec![0.0; len];
                for j in (0..len).filter(|&j| mask[j]) {
                    let vj = &t.v[j * inner + off..j * inner + off + d];
                    dp[j] = dot(dout, vj);
                    for c in 0..d {
                        dv[j * inner + off + c] += p[j] * dout[c];
                    }
                }
                let weighted: f64 = (0..len).filter(|&j| mask[j]).map(|j| p[j] * dp[j]).sum();
                for j in (0..len).filter(|&j| mask[j]) {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        dq[i * inner + off + c] += ds * t.k[j * inner + off + c];
                        dk[j * inner + off + c] += ds * t.q[i * inner + off + c];
                    }
                }
            }
        }
        for (g, w) in [(&dq, &a.wq), (&dk, &a.wk), (&dv, &a.wv)] {
            let contrib = matmul_t(g, len, inner, w, m);
            for (z, c) in dz.iter_mut().zip(contrib) {
                *z += c;
            }
        }
        dz
    }

    fn check_batch(&self, batch: &EmbeddedBatch) -> Result<()> {
        if batch.dim != self.dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim,
                actual: batch.dim,
            });
        }
        Ok(())
    }

    pub fn forward(&self, batch: &EmbeddedBatch) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let traces = self.traces(batch)?;
        let n = self.n_classes;
        let mut pooled = Vec::with_capacity(batch.batch * n);
        let mut per_token = Vec::with_capacity(batch.batch * batch.len * n);
        for t in &traces {
            pooled.extend_from_slice(&t.pooled_logits);
            per_token.extend_from_slice(&t.token_logits);
        }
        Ok(ForwardOutput {
            n_classes: n,
            pooled,
            per_token,
        })
    }

    fn traces(&self, batch: &EmbeddedBatch) -> Result<Vec<SequenceTrace>> {
        (0..batch.batch)
            .into_par_iter()
            .map(|b| {
                let (x, mask) = batch.sequence(b);
                self.forward_sequence(x, mask)
            })
            .collect()
    }

    /// Mean-pooled encoder features (pre-head), batch × feature_dim.
    pub fn pooled_features(&self, batch: &EmbeddedBatch) -> Result<Vec<Vec<f64>>> {
        self.check_batch(batch)?;
        Ok(self
            .traces(batch)?
            .into_iter()
            .map(|t| t.pooled_features)
            .collect())
    }

    /// dLoss/d(input embeddings), batch × len × dim.
    pub fn input_gradient(&self, batch: &EmbeddedBatch, grad: OutputGrad<'_>) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let n = self.n_classes;
        let expected = match grad {
            OutputGrad::Pooled(_) => batch.batch * n,
            OutputGrad::PerToken(_) => batch.batch * batch.len * n,
        };
        let actual = match grad {
            OutputGrad::Pooled(g) | OutputGrad::PerToken(g) => g.len(),
        };
        if expected != actual {
            return Err(ModelError::DimensionMismatch { expected, actual });
        }
        let traces = self.traces(batch)?;
        let per_seq: Vec<Vec<f64>> = traces
            .par_iter()
            .enumerate()
            .map(|(b, t)| {
                let g = match grad {
                    OutputGrad::Pooled(g) => SequenceGrad::Pooled(&g[b * n..(b + 1) * n]),
                    OutputGrad::PerToken(g) => {
                        let span = batch.len * n;
                        SequenceGrad::PerToken(&g[b * span..(b + 1) * span])
                    }
                };
                self.backward_sequence(t, g, None)
            })
            .collect::<Result<_>>()?;
        Ok(per_seq.concat())
    }
}

struct NamedTensor<'a> {
    name: String,
    shape: (usize, usize),
    values: &'a [f64],
}

impl<'a> NamedTensor<'a> {
    fn new(name: &str, shape: (usize, usize), values: &'a [f64]) -> Self {
        Self::owned(name.to_string(), shape, values)
    }

    fn owned(name: String, shape: (usize, usize), values: &'a [f64]) -> Self {
        Self {
            name,
            shape,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: [usize; 2],
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub encoder: String,
    pub dim: usize,
    pub n_classes: usize,
    pub activation: String,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub heads: usize,
    #[serde(default)]
    pub head_dim: usize,
    pub tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ModelError::MissingFile(path.to_path_buf())
        } else {
            ModelError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

pub fn save_frozen_model(model: &FrozenClassifier, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::new();
    for t in model.named_tensors() {
        let matrix = EmbeddingMatrix::new(t.shape.0, t.shape.1, t.values.to_vec())?;
        let bytes = matrix.to_bytes();
        let file = format!("{}.bin", t.name);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        entries.push(TensorEntry {
            name: t.name,
            file,
            shape: [t.shape.0, t.shape.1],
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = ModelManifest {
        encoder: model.encoder_kind().into(),
        dim: model.dim,
        n_classes: model.n_classes,
        activation: model.activation.name().into(),
        hidden: model.layers.iter().map(|l| l.outputs).collect(),
        heads: model.attention.as_ref().map_or(0, |a| a.heads),
        head_dim: model.attention.as_ref().map_or(0, |a| a.head_dim),
        tensors: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn load_frozen_model(dir: impl AsRef<Path>) -> Result<FrozenClassifier> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    let activation = Activation::parse(&manifest.activation)?;
    let with_attention = match manifest.encoder.as_str() {
        "mean_pool_mlp" => false,
        "attention" => true,
        other => return Err(ModelError::UnknownEncoder(other.into())),
    };
    let m = manifest.dim;

    let load = |name: &str, expected: (usize, usize)| -> Result<Vec<f64>> {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ModelError::MissingTensor(name.into()))?;
        let found = (entry.shape[0], entry.shape[1]);
        if found != expected {
            return Err(ModelError::ShapeMismatch {
                tensor: name.into(),
                expected,
                found,
                source_of: "manifest",
            });
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(ModelError::BlobHash(name.into()));
        }
        let matrix = EmbeddingMatrix::from_bytes(&bytes, &entry.file)?;
        let blob = (matrix.rows(), matrix.dim());
        if blob != expected {
            return Err(ModelError::ShapeMismatch {
                tensor: name.into(),
                expected,
                found: blob,
                source_of: "blob",
            });
        }
        Ok(matrix.data().to_vec())
    };

    let attention = if with_attention {
        let inner = manifest.heads * manifest.head_dim;
        Some(AttentionBlock {
            heads: manifest.heads,
            head_dim: manifest.head_dim,
            wq: load("attn.wq", (m, inner))?,
            wk: load("attn.wk", (m, inner))?,
            wv: load("attn.wv", (m, inner))?,
            wo: load("attn.wo", (inner, m))?,
        })
    } else {
        None
    };
    let mut layers = Vec::new();
    let mut width = m;
    for (i, &h) in manifest.hidden.iter().enumerate() {
        let w = load(&format!("layer{i}.weight"), (width, h))?;
        let b = load(&format!("layer{i}.bias"), (1, h))?;
        layers.push(Dense::new(width, h, w, b)?);
        width = h;
    }
    let n = manifest.n_classes;
    let head = Dense::new(
        width,
        n,
        load("head.weight", (width, n))?,
        load("head.bias", (1, n))?,
    )?;
    FrozenClassifier::new(m, activation, attention, layers, head)
}
