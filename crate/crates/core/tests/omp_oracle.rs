use nalgebra::{DMatrix, DVector};
use r2dl::sparse_map::{
    omp_sparse_code, reconstruct, reproject, sparse_code_all, SparseCode, SparseCodeConfig,
};
use r2dl::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussianish(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0))
        .collect()
}

fn random_dictionary(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    EmbeddingMatrix::new(rows, dim, gaussianish(rng, rows * dim)).unwrap()
}

/// Textbook greedy: re-solve the full least-squares problem on the support
/// after every selection.
fn naive_omp(target: &[f64], dict: &EmbeddingMatrix, k: usize) -> Vec<(usize, f64)> {
    let v = DVector::from_column_slice(target);
    let vnorm = v.norm();
    let mut support: Vec<usize> = Vec::new();
    let mut coeffs = DVector::zeros(0);
    let mut residual = v.clone();
    while support.len() < k && residual.norm() > 1e-12 * vnorm {
        let mut best = None;
        for j in 0..dict.rows() {
            if support.contains(&j) {
                continue;
            }
            let a = DVector::from_column_slice(dict.row(j));
            let score = a.dot(&residual).abs() / a.norm();
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        support.push(best.unwrap().0);
        let a = DMatrix::from_fn(dict.dim(), support.len(), |r, c| dict.row(support[c])[r]);
        coeffs = a.clone().svd(true, true).solve(&v, 1e-14).unwrap();
        residual = &v - &a * &coeffs;
    }
    let mut out: Vec<(usize, f64)> = support.into_iter().zip(coeffs.iter().copied()).collect();
    out.sort_by_key(|e| e.0);
    out
}

fn assert_invariants(code: &SparseCode, k: usize) {
    assert!(code.row.nnz() <= k);
    for w in code.residual_trace.windows(2) {
        assert!(
            w[1] <= w[0] * (1.0 + 1e-12),
            "residual increased: {:?}",
            code.residual_trace
        );
    }
}

fn mutual_coherence(dict: &EmbeddingMatrix) -> f64 {
    let norms: Vec<f64> = dict
        .iter_rows()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut mu: f64 = 0.0;
    for i in 0..dict.rows() {
        for j in i + 1..dict.rows() {
            let d: f64 = dict
                .row(i)
                .iter()
                .zip(dict.row(j))
                .map(|(a, b)| a * b)
                .sum();
            mu = mu.max(d.abs() / (norms[i] * norms[j]));
        }
    }
    mu
}

#[test]
fn omp_matches_naive_greedy_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..120 {
        let rows = rng.gen_range(4..=16);
        let dim = rng.gen_range(4..=16);
        let k = rng.gen_range(1..=4).min(rows);
        let dict = random_dictionary(&mut rng, rows, dim);
        let target = gaussianish(&mut rng, dim);
        let cfg = SparseCodeConfig {
            k,
            ..Default::default()
        };
        let code = omp_sparse_code(&target, &dict, &cfg).unwrap();
        assert_invariants(&code, k);
        let oracle = naive_omp(&target, &dict, k);
        let got = code.row.entries();
        assert_eq!(got.len(), oracle.len(), "case {case}");
        for (a, b) in got.iter().zip(&oracle) {
            assert_eq!(a.0, b.0, "case {case}");
            assert!((a.1 - b.1).abs() < 1e-10, "case {case}: {} vs {}", a.1, b.1);
        }
    }
}

#[test]
fn exact_recovery_on_incoherent_dictionaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0;
    while cases < 50 {
        let dict = random_dictionary(&mut rng, 16, 64);
        if mutual_coherence(&dict) >= 0.5 {
            continue;
        }
        let k = rng.gen_range(1..=4);
        let mut atoms: Vec<usize> = Vec::new();
        while atoms.len() < k {
            let j = rng.gen_range(0..16);
            if !atoms.contains(&j) {
                atoms.push(j);
            }
        }
        let mut target = vec![0.0; 64];
        for &j in &atoms {
            let c = rng.gen_range(0.5..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for (t, a) in target.iter_mut().zip(dict.row(j)) {
                *t += c * a;
            }
        }
        let code = omp_sparse_code(
            &target,
            &dict,
            &SparseCodeConfig {
                k,
                ..Default::default()
            },
        )
        .unwrap();
        assert_invariants(&code, k);
        assert!(
            code.residual_norm() < 1e-8,
            "residual {}",
            code.residual_norm()
        );
        let mut got: Vec<usize> = code.selection_order.clone();
        got.sort_unstable();
        atoms.sort_unstable();
        assert_eq!(got, atoms);
        cases += 1;
    }
}

#[test]
fn epsilon_stops_early_and_bounds_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let dict = random_dictionary(&mut rng, 32, 8);
        let target = gaussianish(&mut rng, 8);
        let norm = target.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cfg = SparseCodeConfig {
            k: 8,
            epsilon: 0.3,
            ..Default::default()
        };
        let code = omp_sparse_code(&target, &dict, &cfg).unwrap();
        assert_invariants(&code, 8);
        let r = code.residual_norm();
        // Either the tolerance was met or the sparsity budget ran out.
        assert!(r <= 0.3 * norm + 1e-12 || code.row.nnz() == 8);
        if code.row.nnz() > 1 {
            let before = code.residual_trace[code.residual_trace.len() - 2];
            assert!(before > 0.3 * norm);
        }
    }
}

#[test]
fn reprojection_keeps_k_and_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dict = random_dictionary(&mut rng, 40, 12);
    let targets = random_dictionary(&mut rng, 10, 12);
    let cfg = SparseCodeConfig {
        k: 5,
        ..Default::default()
    };
    let (theta, _) = sparse_code_all(&targets, &dict, &cfg).unwrap();
    let mut dense = theta.to_dense();
    for v in dense.data.iter_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    let (once, report) = reproject(&dense, &dict, &cfg).unwrap();
    assert!(once.max_row_nnz() <= 5);
    assert!(report.frobenius_residual.is_finite());
    let (twice, again) = reproject(&once.to_dense(), &dict, &cfg).unwrap();
    assert_eq!(once, twice);
    assert_eq!(again.frobenius_residual, 0.0);
    assert_eq!(reconstruct(&once, &dict).unwrap().rows(), 10);
}
