//! Small dense helpers shared by the numeric modules.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Incremental thin QR of a growing column set via modified Gram-Schmidt
/// with one reorthogonalization pass.
#[derive(Debug, Clone, Default)]
pub struct IncrementalQr {
    q: Vec<Vec<f64>>,
    /// Column-major upper triangle: `r[j][i]` for i <= j.
    r: Vec<Vec<f64>>,
}

impl IncrementalQr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self, i: usize) -> &[f64] {
        &self.q[i]
    }

    /// Appends a column. Returns `false` (and leaves the factorization
    /// untouched) when the column is numerically inside the current span.
    pub fn push(&mut self, col: &[f64]) -> bool {
        let scale = norm2(col);
        let mut v = col.to_vec();
        let mut coeffs = vec![0.0; self.q.len()];
        for _ in 0..2 {
            for (qi, c) in self.q.iter().zip(coeffs.iter_mut()) {
                let p = dot(qi, &v);
                axpy(-p, qi, &mut v);
                *c += p;
            }
        }
        let n = norm2(&v);
        if scale == 0.0 || n <= 1e-12 * scale {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= n);
        coeffs.push(n);
        self.q.push(v);
        self.r.push(coeffs);
        true
    }

    /// Solves `R x = rhs` by back substitution.
    pub fn solve_r(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.q.len();
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for (j, xj) in x.iter().enumerate().skip(i + 1) {
                s -= self.r[j][i] * xj;
            }
            x[i] = s / self.r[i][i];
        }
        x
    }
}

/// Least-squares coefficients of `target` on `columns`. Columns that are
/// numerically dependent on earlier ones receive a zero coefficient.
pub fn least_squares(columns: &[&[f64]], target: &[f64]) -> Vec<f64> {
    let mut qr = IncrementalQr::new();
    let mut kept = Vec::with_capacity(columns.len());
    for (i, c) in columns.iter().enumerate() {
        if qr.push(c) {
            kept.push(i);
        }
    }
    let qtb: Vec<f64> = (0..qr.len()).map(|i| dot(qr.q(i), target)).collect();
    let sol = qr.solve_r(&qtb);
    let mut out = vec![0.0; columns.len()];
    for (k, i) in kept.into_iter().enumerate() {
        out[i] = sol[k];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_squares_recovers_exact_combination() {
        let a = [1.0, 0.0, 1.0];
        let b = [0.0, 2.0, 1.0];
        let t: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 3.0 * x - 0.5 * y).collect();
        let c = least_squares(&[&a, &b], &t);
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn dependent_column_gets_zero() {
        let a = [1.0, 1.0];
        let b = [2.0, 2.0];
        let c = least_squares(&[&a, &b], &[3.0, 3.0]);
        assert!((c[0] - 3.0).abs() < 1e-12);
        assert_eq!(c[1], 0.0);
    }
}
