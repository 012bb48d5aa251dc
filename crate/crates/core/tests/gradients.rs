#![allow(clippy::needless_range_loop)]

use r2dl::frozen_model::{Activation, EmbeddedBatch, FrozenClassifier, OutputGrad};
use r2dl::labelmap::LabelMapping;
use r2dl::sparse_map::sparse_code_all;
use r2dl::synthetic::{random_classifier, random_dictionary};
use r2dl::training::{loss_and_theta_gradient, Example, ExampleTarget};
use r2dl::SparseCodeConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_batch(rng: &mut ChaCha8Rng, batch: usize, len: usize, dim: usize) -> EmbeddedBatch {
    let mut mask: Vec<bool> = (0..batch * len).map(|_| rng.gen_bool(0.8)).collect();
    for b in 0..batch {
        mask[b * len] = true;
    }
    let data = (0..batch * len * dim)
        .map(|i| {
            if mask[i / dim] {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        })
        .collect();
    EmbeddedBatch {
        batch,
        len,
        dim,
        data,
        mask,
        token_ids: vec![0; batch * len],
    }
}

/// Scalar `Σ g·logits` for a fixed random `g`.
fn probe(model: &FrozenClassifier, batch: &EmbeddedBatch, g: &[f64], per_token: bool) -> f64 {
    let out = model.forward(batch).unwrap();
    let logits = if per_token {
        &out.per_token
    } else {
        &out.pooled
    };
    logits.iter().zip(g).map(|(a, b)| a * b).sum()
}

fn check_input_gradient(model: &FrozenClassifier, rng: &mut ChaCha8Rng, per_token: bool) -> f64 {
    let (batch_n, len) = (3, 5);
    let mut batch = random_batch(rng, batch_n, len, model.dim());
    let n_out = if per_token { batch_n * len } else { batch_n } * model.n_classes();
    let g: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grad = if per_token {
        model
            .input_gradient(&batch, OutputGrad::PerToken(&g))
            .unwrap()
    } else {
        model
            .input_gradient(&batch, OutputGrad::Pooled(&g))
            .unwrap()
    };
    let unmasked: Vec<usize> = (0..batch.data.len())
        .filter(|&i| batch.mask[i / model.dim()])
        .collect();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let i = unmasked[rng.gen_range(0..unmasked.len())];
        let orig = batch.data[i];
        batch.data[i] = orig + H;
        let plus = probe(model, &batch, &g, per_token);
        batch.data[i] = orig - H;
        let minus = probe(model, &batch, &g, per_token);
        batch.data[i] = orig;
        worst = worst.max(rel_err((plus - minus) / (2.0 * H), grad[i]));
    }
    worst
}

fn models() -> Vec<FrozenClassifier> {
    (0..10u64)
        .map(|s| {
            let hidden: Vec<usize> = (0..(s % 3) as usize + 1).map(|l| 5 + l).collect();
            let attn = (s % 2 == 1).then_some((2, 3));
            random_classifier(6, &hidden, 3, Activation::Tanh, attn, 100 + s)
        })
        .collect()
}

#[test]
fn pooled_input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for model in models() {
        let worst = check_input_gradient(&model, &mut rng, false);
        assert!(
            worst < 1e-4,
            "{} relative error {worst}",
            model.encoder_kind()
        );
    }
}

#[test]
fn per_token_input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for model in models() {
        let worst = check_input_gradient(&model, &mut rng, true);
        assert!(
            worst < 1e-4,
            "{} relative error {worst}",
            model.encoder_kind()
        );
    }
}

#[test]
fn linear_head_only_model_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = random_classifier(4, &[], 2, Activation::Relu, None, 9);
    assert!(check_input_gradient(&model, &mut rng, false) < 1e-8);
}

#[test]
fn theta_gradient_matches_end_to_end_finite_differences() {
    let dim = 8;
    let dict = random_dictionary(12, dim, 0.5, 21);
    let model = random_classifier(dim, &[6], 2, Activation::Tanh, None, 22);
    let h = LabelMapping::classification([(0, "neg"), (1, "pos")]).unwrap();
    let init = random_dictionary(5, dim, 0.5, 23);
    let (theta, _) = sparse_code_all(
        &init,
        &dict,
        &SparseCodeConfig {
            k: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let mut dense = theta.to_dense();
    let examples = vec![
        Example {
            tokens: vec![0, 1, 2, 1, 4],
            target: ExampleTarget::Sequence(1),
            value: None,
        },
        Example {
            tokens: vec![3, 3, 0],
            target: ExampleTarget::Sequence(0),
            value: None,
        },
    ];
    let (_, grad) = loss_and_theta_gradient(&dense, &dict, &model, &h, &examples).unwrap();
    let mut checked = 0;
    for t in 0..dense.rows {
        for j in 0..dense.cols {
            let i = t * dense.cols + j;
            let orig = dense.data[i];
            dense.data[i] = orig + H;
            let plus = loss_and_theta_gradient(&dense, &dict, &model, &h, &examples)
                .unwrap()
                .0;
            dense.data[i] = orig - H;
            let minus = loss_and_theta_gradient(&dense, &dict, &model, &h, &examples)
                .unwrap()
                .0;
            dense.data[i] = orig;
            let fd = (plus - minus) / (2.0 * H);
            assert!(
                rel_err(fd, grad[i]) < 1e-4,
                "theta[{t}][{j}]: fd {fd} analytic {}",
                grad[i]
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 5 * 12);
}

#[test]
fn token_level_theta_gradient() {
    let dim = 6;
    let dict = random_dictionary(9, dim, 0.5, 31);
    let model = random_classifier(dim, &[5], 3, Activation::Tanh, Some((2, 2)), 32);
    let h = LabelMapping::classification([(0, "C"), (1, "E"), (2, "H")]).unwrap();
    let init = random_dictionary(4, dim, 0.5, 33);
    let (theta, _) = sparse_code_all(
        &init,
        &dict,
        &SparseCodeConfig {
            k: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let mut dense = theta.to_dense();
    let examples = vec![Example {
        tokens: vec![0, 1, 2, 3, 1],
        target: ExampleTarget::PerToken(vec![0, 2, 1, 1, 0]),
        value: None,
    }];
    let (_, grad) = loss_and_theta_gradient(&dense, &dict, &model, &h, &examples).unwrap();
    for i in 0..dense.data.len() {
        let orig = dense.data[i];
        dense.data[i] = orig + H;
        let plus = loss_and_theta_gradient(&dense, &dict, &model, &h, &examples)
            .unwrap()
            .0;
        dense.data[i] = orig - H;
        let minus = loss_and_theta_gradient(&dense, &dict, &model, &h, &examples)
            .unwrap()
            .0;
        dense.data[i] = orig;
        assert!(rel_err((plus - minus) / (2.0 * H), grad[i]) < 1e-4);
    }
}
