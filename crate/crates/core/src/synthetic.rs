//! Seeded synthetic fixtures: random classifiers and dictionaries, a 2-class
//! "sentiment" source task with a fitted then frozen classifier, and a
//! protein-like target task labeled by a hidden linear rule over residue
//! composition.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bioseq::{Item, Label, Split, TaskDataset, TaskKind};
use crate::embeddings::EmbeddingMatrix;
use crate::frozen_model::{
    Activation, AttentionBlock, Dense, FrozenClassifier, ModelError, ParamGrads, SequenceGrad,
};
use crate::training::cross_entropy_loss;

/// Values are rounded through f32 so fixtures survive the on-disk formats
/// bit-exactly.
fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| f32_round(rng.gen_range(-scale..scale)))
        .collect()
}

fn random_dense(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Dense {
    let scale = (3.0 / inputs as f64).sqrt();
    let weight = uniform(rng, inputs * outputs, scale);
    let bias = uniform(rng, outputs, 0.1);
    Dense::new(inputs, outputs, weight, bias).expect("shapes are consistent")
}

/// Randomly initialized classifier with unit-variance-preserving weights.
pub fn random_classifier(
    dim: usize,
    hidden: &[usize],
    n_classes: usize,
    activation: Activation,
    attention: Option<(usize, usize)>,
    seed: u64,
) -> FrozenClassifier {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attention = attention.map(|(heads, head_dim)| {
        let inner = heads * head_dim;
        let s_in = (1.0 / dim as f64).sqrt();
        let s_out = (1.0 / inner as f64).sqrt();
        AttentionBlock {
            heads,
            head_dim,
            wq: uniform(&mut rng, dim * inner, s_in),
            wk: uniform(&mut rng, dim * inner, s_in),
            wv: uniform(&mut rng, dim * inner, s_in),
            wo: uniform(&mut rng, inner * dim, s_out),
        }
    });
    let mut width = dim;
    let layers: Vec<Dense> = hidden
        .iter()
        .map(|&h| {
            let d = random_dense(&mut rng, width, h);
            width = h;
            d
        })
        .collect();
    let head = random_dense(&mut rng, width, n_classes);
    FrozenClassifier::new(dim, activation, attention, layers, head).expect("valid architecture")
}

/// Dictionary with uniform entries of standard deviation `scale`.
pub fn random_dictionary(rows: usize, dim: usize, scale: f64, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingMatrix::new(
        rows,
        dim,
        uniform(&mut rng, rows * dim, scale * 3f64.sqrt()),
    )
    .expect("shape is consistent")
}

/// Sequences of token ids with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequences {
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceTaskSpec {
    pub vocab: usize,
    pub dim: usize,
    pub hidden: usize,
    pub n_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Standard deviation of dictionary entries.
    pub dictionary_scale: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SourceTaskSpec {
    fn default() -> Self {
        Self {
            vocab: 64,
            dim: 16,
            hidden: 32,
            n_sequences: 2400,
            min_len: 8,
            max_len: 24,
            dictionary_scale: 0.25,
            epochs: 60,
            seed: 2024,
        }
    }
}

/// Binary "sentiment" over a token vocabulary: every token carries a
/// polarity `w·V_S[t]` for a hidden direction `w`, and a sequence is
/// positive when its polarities sum above zero.
pub fn sentiment_task(dictionary: &EmbeddingMatrix, spec: &SourceTaskSpec) -> LabeledSequences {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5e47);
    let w: Vec<f64> = (0..dictionary.dim())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let polarity: Vec<f64> = dictionary
        .iter_rows()
        .map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum())
        .collect();
    let mut sequences = Vec::with_capacity(spec.n_sequences);
    let mut labels = Vec::with_capacity(spec.n_sequences);
    while sequences.len() < spec.n_sequences {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let seq: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(0..dictionary.rows()))
            .collect();
        let score: f64 = seq.iter().map(|&t| polarity[t]).sum();
        if score == 0.0 {
            continue;
        }
        labels.push(usize::from(score > 0.0));
        sequences.push(seq);
    }
    LabeledSequences { sequences, labels }
}

/// Source dictionary, frozen classifier and its held-out source accuracy.
#[derive(Debug, Clone)]
pub struct SourceFixture {
    pub dictionary: EmbeddingMatrix,
    pub model: FrozenClassifier,
    pub source_accuracy: f64,
}

fn sequence_input(dictionary: &EmbeddingMatrix, seq: &[usize]) -> (Vec<f64>, Vec<bool>) {
    let mut x = Vec::with_capacity(seq.len() * dictionary.dim());
    for &t in seq {
        x.extend_from_slice(dictionary.row(t));
    }
    (x, vec![true; seq.len()])
}

/// Fraction of `data` the model classifies correctly with `table` as its
/// embedding lookup.
pub fn accuracy_on(
    model: &FrozenClassifier,
    table: &EmbeddingMatrix,
    data: &LabeledSequences,
) -> Result<f64, ModelError> {
    let correct: Vec<bool> = data
        .sequences
        .par_iter()
        .zip(&data.labels)
        .map(|(seq, &y)| {
            let (x, mask) = sequence_input(table, seq);
            let trace = model.forward_sequence(&x, &mask)?;
            let logits = trace.pooled_logits();
            let pred = (0..logits.len())
                .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            Ok(pred == y)
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len().max(1) as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            **p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

fn flatten(g: &ParamGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in &g.layers {
        out.extend_from_slice(w);
        out.extend_from_slice(b);
    }
    out.extend_from_slice(&g.head.0);
    out.extend_from_slice(&g.head.1);
    out
}

fn params_mut<'a>(layers: &'a mut [Dense], head: &'a mut Dense) -> Vec<&'a mut f64> {
    let mut out: Vec<&mut f64> = Vec::new();
    for d in layers.iter_mut() {
        out.extend(d.weight.iter_mut());
        out.extend(d.bias.iter_mut());
    }
    out.extend(head.weight.iter_mut());
    out.extend(head.bias.iter_mut());
    out
}

/// Fits the MLP and head of a mean-pool classifier with Adam on
/// cross-entropy. The dictionary stays fixed. Returns the model with
/// parameters rounded to f32.
pub fn fit_classifier(
    initial: &FrozenClassifier,
    dictionary: &EmbeddingMatrix,
    data: &LabeledSequences,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<FrozenClassifier, ModelError> {
    let activation = initial.activation();
    let attention = initial.attention().cloned();
    let mut layers = initial.layers().to_vec();
    let mut head = initial.head().clone();
    let n_params = params_mut(&mut layers, &mut head).len();
    let mut adam = Adam::new(n_params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.sequences.len()).collect();
    let mut model = initial.clone();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let per_seq: Vec<ParamGrads> = chunk
                .par_iter()
                .map(|&i| {
                    let (x, mask) = sequence_input(dictionary, &data.sequences[i]);
                    let trace = model.forward_sequence(&x, &mask)?;
                    let (_, g) = cross_entropy_loss(
                        trace.pooled_logits(),
                        model.n_classes(),
                        &[data.labels[i]],
                        None,
                    )
                    .expect("labels are in range");
                    let mut grads = ParamGrads::zeros_like(&model);
                    model.backward_sequence(&trace, SequenceGrad::Pooled(&g), Some(&mut grads))?;
                    Ok(grads)
                })
                .collect::<Result<_, ModelError>>()?;
            let mut total = vec![0.0; n_params];
            for g in &per_seq {
                for (t, v) in total.iter_mut().zip(flatten(g)) {
                    *t += v / chunk.len() as f64;
                }
            }
            adam.step(&mut params_mut(&mut layers, &mut head), &total, lr);
            model = FrozenClassifier::new(
                dictionary.dim(),
                activation,
                attention.clone(),
                layers.clone(),
                head.clone(),
            )?;
        }
    }
    for p in params_mut(&mut layers, &mut head) {
        *p = f32_round(*p);
    }
    FrozenClassifier::new(dictionary.dim(), activation, attention, layers, head)
}

/// Builds the source dictionary and classifier: a tanh mean-pool MLP fit on
/// the sentiment task, then frozen. Accuracy is measured on held-out
/// sequences.
pub fn source_fixture(spec: &SourceTaskSpec) -> Result<SourceFixture, ModelError> {
    let dictionary = random_dictionary(spec.vocab, spec.dim, spec.dictionary_scale, spec.seed);
    let data = sentiment_task(&dictionary, spec);
    let split = data.sequences.len() * 5 / 6;
    let train = LabeledSequences {
        sequences: data.sequences[..split].to_vec(),
        labels: data.labels[..split].to_vec(),
    };
    let held_out = LabeledSequences {
        sequences: data.sequences[split..].to_vec(),
        labels: data.labels[split..].to_vec(),
    };
    let init = random_classifier(
        spec.dim,
        &[spec.hidden],
        2,
        Activation::Tanh,
        None,
        spec.seed + 1,
    );
    let model = fit_classifier(
        &init,
        &dictionary,
        &train,
        spec.epochs,
        50,
        0.01,
        spec.seed + 2,
    )?;
    let source_accuracy = accuracy_on(&model, &dictionary, &held_out)?;
    Ok(SourceFixture {
        dictionary,
        model,
        source_accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetTaskSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Candidates whose score lies within this many standard deviations of
    /// the decision threshold are discarded.
    pub margin: f64,
    pub seed: u64,
}

impl Default for TargetTaskSpec {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_test: 200,
            min_len: 15,
            max_len: 40,
            margin: 0.1,
            seed: 7,
        }
    }
}

/// Protein-like binary task over the 20 residues. Each residue has a hidden
/// weight; a sequence is class 1 when its mean residue weight exceeds the
/// pool median. Both splits are class-balanced.
pub fn composition_task(spec: &TargetTaskSpec) -> TaskDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pool_size = 4 * (spec.n_train + spec.n_test);
    let pool: Vec<(Vec<usize>, f64)> = (0..pool_size)
        .map(|_| {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..20)).collect();
            let score = seq.iter().map(|&r| weights[r]).sum::<f64>() / len as f64;
            (seq, score)
        })
        .collect();
    let mut scores: Vec<f64> = pool.iter().map(|p| p.1).collect();
    scores.sort_by(f64::total_cmp);
    let median = scores[scores.len() / 2];
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64).sqrt();

    let per_class = [
        spec.n_train / 2 + spec.n_test / 2,
        spec.n_train.div_ceil(2) + spec.n_test.div_ceil(2),
    ];
    let mut by_class: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
    for (seq, score) in pool {
        if (score - median).abs() < spec.margin * sd {
            continue;
        }
        let c = usize::from(score > median);
        if by_class[c].len() < per_class[c] {
            by_class[c].push(seq);
        }
    }
    assert!(
        by_class[0].len() == per_class[0] && by_class[1].len() == per_class[1],
        "candidate pool too small for the requested margin"
    );

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, seqs) in by_class.into_iter().enumerate() {
        let n_test_c = if c == 0 {
            spec.n_test / 2
        } else {
            spec.n_test.div_ceil(2)
        };
        for (i, seq) in seqs.into_iter().enumerate() {
            let item = Item {
                sequence: seq,
                label: Label::Class(c),
            };
            if i < n_test_c {
                test.push(item);
            } else {
                train.push(item);
            }
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    let n_train = train.len();
    let items: Vec<Item> = train.into_iter().chain(test).collect();
    let n = items.len();
    TaskDataset {
        items,
        kind: TaskKind::SequenceClassification,
        label_names: vec!["0".into(), "1".into()],
        split: Split {
            train: (0..n_train).collect(),
            test: (n_train..n).collect(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        let a = random_classifier(8, &[4], 2, Activation::Tanh, Some((2, 2)), 3);
        let b = random_classifier(8, &[4], 2, Activation::Tanh, Some((2, 2)), 3);
        assert_eq!(a.param_hash(), b.param_hash());
        assert_eq!(
            random_dictionary(5, 3, 1.0, 1),
            random_dictionary(5, 3, 1.0, 1)
        );
    }

    #[test]
    fn composition_task_is_balanced() {
        let ds = composition_task(&TargetTaskSpec::default());
        ds.validate().unwrap();
        assert_eq!(ds.split.train.len(), 500);
        assert_eq!(ds.split.test.len(), 200);
        let positives = ds
            .test_items()
            .filter(|i| i.label == Label::Class(1))
            .count();
        assert_eq!(positives, 100);
        assert_eq!(ds, composition_task(&TargetTaskSpec::default()));
    }
}
