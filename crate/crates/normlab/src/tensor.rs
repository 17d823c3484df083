//! Dense 64-bit matrix core: arithmetic, softmax, RMS/Layer normalization,
//! and the matrix norms the gradient-bound evaluators need.
//!
//! Row-major storage is the canonical layout; `vecjac::vec_r` is defined
//! against it. Values are immutable after construction in all verification
//! paths; shape mismatches in internal arithmetic are programmer errors and
//! panic, while contract-level errors (non-finite data, non-convergence)
//! surface as [`TensorError`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {got} does not match {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("power iteration did not converge within {0} iterations (ill-conditioned input)")]
    NoConvergence(usize),
}

/// Dense 2-D array of 64-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Checked constructor: length must match and all entries must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch { rows, cols, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { row: i / cols.max(1), col: i % cols.max(1) });
        }
        Ok(Self { rows, cols, data })
    }

    /// Unchecked-finiteness constructor for internal arithmetic and for
    /// diagnostic outputs that are allowed to carry non-finite values.
    pub fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "raw matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// `selfᵀ * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for i in 0..self.cols {
                let a = a_row[i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "hadamard shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }
}

/// Learnable gain and stabilizer of one normalization layer.
#[derive(Debug, Clone)]
pub struct NormParams {
    /// Gain vector, one entry per normalized coordinate.
    pub alpha: Vec<f64>,
    /// Non-negative stabilizer added to mean(x²) under the root.
    pub eps: f64,
}

impl NormParams {
    pub fn ones(d: usize, eps: f64) -> Self {
        assert!(eps >= 0.0, "eps must be non-negative");
        Self { alpha: vec![1.0; d], eps }
    }
}

/// RMS normalization of one row: `α ⊙ x·√d / √(Σx² + d·eps)`.
///
/// With α=1 and eps=0 the output has Euclidean norm exactly √d for nonzero
/// input; the all-zero input maps to the all-zero output (0/0 → 0 convention)
/// so diagnostics never abort mid-run.
pub fn rms_norm(x: &[f64], p: &NormParams) -> Vec<f64> {
    let d = x.len();
    assert_eq!(p.alpha.len(), d, "gain length mismatch");
    let sumsq: f64 = x.iter().map(|v| v * v).sum();
    let denom = (sumsq + d as f64 * p.eps).sqrt();
    if denom == 0.0 {
        return vec![0.0; d];
    }
    let scale = (d as f64).sqrt() / denom;
    x.iter().zip(&p.alpha).map(|(v, a)| a * v * scale).collect()
}

/// Layer normalization: RMS normalization of the mean-centered input.
pub fn layer_norm(x: &[f64], p: &NormParams) -> Vec<f64> {
    let d = x.len();
    assert!(d >= 2, "layer_norm needs d >= 2");
    let mean = x.iter().sum::<f64>() / d as f64;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    rms_norm(&centered, p)
}

/// Row-wise RMS normalization of a matrix with a shared gain.
pub fn rms_norm_rows(m: &Matrix, p: &NormParams) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let y = rms_norm(m.row(i), p);
        out.row_mut(i).copy_from_slice(&y);
    }
    out
}

/// Row-wise softmax with optional causal masking (entries above the diagonal
/// excluded before normalization; masked outputs are exactly zero).
pub fn softmax_rows(m: &Matrix, causal: bool) -> Matrix {
    if causal {
        assert_eq!(m.rows(), m.cols(), "causal softmax expects square scores");
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let limit = if causal { i + 1 } else { m.cols() };
        let row = m.row(i);
        let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..limit {
            let e = (row[j] - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..limit {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    out
}

/// Deterministic 64-bit mixing function (splitmix64 finalizer); the crate's
/// one primitive for deriving per-trial seeds and pseudo-random start vectors.
pub fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gram_smaller(m: &Matrix) -> Matrix {
    // Gram matrix on the smaller side, so its spectrum is exactly the squared
    // singular values of m (no padding zeros).
    if m.cols() <= m.rows() {
        m.matmul_tn(m)
    } else {
        m.matmul_nt(m)
    }
}

/// Largest singular value via power iteration on the Gram matrix, relative
/// tolerance 1e-10, at most 10,000 iterations.
pub fn spectral_norm(m: &Matrix) -> Result<f64, TensorError> {
    const MAX_ITERS: usize = 10_000;
    const REL_TOL: f64 = 1e-10;
    if m.data().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let g = gram_smaller(m);
    let n = g.rows();
    // Deterministic full-support start vector; a fixed pseudo-random direction
    // avoids starting orthogonal to the top eigenvector.
    let mut v: Vec<f64> = (0..n)
        .map(|i| 0.5 + (splitmix64(0x5eed ^ i as u64) as f64) / (u64::MAX as f64))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut lambda_prev = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let mut w = vec![0.0; n];
        for i in 0..n {
            let row = g.row(i);
            w[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let wnorm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wnorm == 0.0 {
            return Ok(0.0);
        }
        w.iter_mut().for_each(|x| *x /= wnorm);
        v = w;
        if (lambda - lambda_prev).abs() <= REL_TOL * lambda.abs().max(f64::MIN_POSITIVE) {
            return Ok(lambda.max(0.0).sqrt());
        }
        lambda_prev = lambda;
    }
    Err(TensorError::NoConvergence(MAX_ITERS))
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Smallest singular value via a full cyclic-Jacobi eigendecomposition of the
/// Gram matrix (desk dimensions only). Rank-deficient inputs return 0.
pub fn min_singular_value(m: &Matrix) -> f64 {
    let g = gram_smaller(m);
    let eigs = jacobi_eigenvalues(&g);
    let min = eigs.into_iter().fold(f64::INFINITY, f64::min);
    min.max(0.0).sqrt()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(g: &Matrix) -> Vec<f64> {
    let n = g.rows();
    if n == 0 {
        return Vec::new();
    }
    let mut a = g.clone();
    let scale = frobenius_norm(&a).max(f64::MIN_POSITIVE);
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q).powi(2);
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    (0..n).map(|i| a.get(i, i)).collect()
}

/// Largest absolute entrywise difference; the workhorse of oracle comparisons.
pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()), "comparing different shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_raw(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Independent one-sided Jacobi SVD: orthogonalize column pairs of the
    /// (tall) matrix; singular values are the resulting column norms.
    fn jacobi_svd_singular_values(m: &Matrix) -> Vec<f64> {
        let a = if m.rows() >= m.cols() { m.clone() } else { m.transpose() };
        let (rows, cols) = (a.rows(), a.cols());
        let mut col: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| a.get(i, j)).collect()).collect();
        for _sweep in 0..100 {
            let mut rotated = false;
            for p in 0..cols {
                for q in (p + 1)..cols {
                    let alpha: f64 = col[p].iter().map(|x| x * x).sum();
                    let beta: f64 = col[q].iter().map(|x| x * x).sum();
                    let gamma: f64 = col[p].iter().zip(&col[q]).map(|(x, y)| x * y).sum();
                    if gamma.abs() <= 1e-15 * (alpha * beta).sqrt().max(1e-300) {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..rows {
                        let vp = col[p][i];
                        let vq = col[q][i];
                        col[p][i] = c * vp - s * vq;
                        col[q][i] = s * vp + c * vq;
                    }
                }
            }
            if !rotated {
                break;
            }
        }
        let mut sv: Vec<f64> = col.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sv
    }

    #[test]
    fn rms_norm_frozen_examples() {
        let p = NormParams::ones(4, 0.0);
        assert_eq!(rms_norm(&[1.0, 1.0, 1.0, 1.0], &p), vec![1.0, 1.0, 1.0, 1.0]);
        let p2 = NormParams::ones(2, 0.0);
        let y = rms_norm(&[3.0, 4.0], &p2);
        let expected = [3.0 * 2f64.sqrt() / 5.0, 4.0 * 2f64.sqrt() / 5.0];
        assert!((y[0] - expected[0]).abs() < 1e-15 && (y[1] - expected[1]).abs() < 1e-15);
        assert!((y[0] - 0.848528).abs() < 1e-6 && (y[1] - 1.131371).abs() < 1e-6);
        assert_eq!(rms_norm(&[0.0, 0.0], &p2), vec![0.0, 0.0]);
    }

    #[test]
    fn rms_norm_row_length_is_sqrt_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in [2usize, 3, 8, 17] {
            let p = NormParams::ones(d, 0.0);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
            let y = rms_norm(&x, &p);
            let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - (d as f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_norm_scale_invariance_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = NormParams::ones(6, 0.0);
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c: f64 = rng.random_range(0.01..100.0);
            let y = rms_norm(&x, &p);
            let yc = rms_norm(&x.iter().map(|v| c * v).collect::<Vec<_>>(), &p);
            let yy = rms_norm(&y, &p);
            for i in 0..6 {
                assert!((y[i] - yc[i]).abs() < 1e-12, "scale invariance");
                assert!((y[i] - yy[i]).abs() < 1e-12, "idempotence");
            }
        }
    }

    #[test]
    fn layer_norm_examples_and_reduction() {
        let p = NormParams::ones(3, 1e-8);
        let y = layer_norm(&[5.0, 5.0, 5.0], &p);
        assert!(y.iter().all(|v| v.abs() < 1e-12));

        let p0 = NormParams::ones(2, 0.0);
        let y = layer_norm(&[1.0, -1.0], &p0);
        assert!((y[0] - 1.0).abs() < 1e-15 && (y[1] + 1.0).abs() < 1e-15);

        // layer_norm(x) == rms_norm(P x) with P = I - (1/d)11ᵀ.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 7;
        let pd = NormParams::ones(d, 0.0);
        let proj = {
            let mut p = Matrix::identity(d);
            for i in 0..d {
                for j in 0..d {
                    p.set(i, j, p.get(i, j) - 1.0 / d as f64);
                }
            }
            p
        };
        for _ in 0..20 {
            let x = rand_matrix(&mut rng, 1, d);
            let px = x.matmul(&proj.transpose());
            let a = layer_norm(x.row(0), &pd);
            let b = rms_norm(px.row(0), &pd);
            for i in 0..d {
                assert!((a[i] - b[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_frozen_examples() {
        let m = Matrix::from_rows(&[&[0.0, 0.0], &[2f64.ln(), 0.0]]);
        let s = softmax_rows(&m, false);
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_are_probability_vectors_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let m = rand_matrix(&mut rng, 4, 4);
            let s = softmax_rows(&m, false);
            for i in 0..4 {
                let sum: f64 = s.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(s.row(i).iter().all(|&v| v >= 0.0));
            }
            let c: f64 = rng.random_range(-5.0..5.0);
            let mut shifted = m.clone();
            for j in 0..4 {
                shifted.set(2, j, shifted.get(2, j) + c);
            }
            let s2 = softmax_rows(&shifted, false);
            for j in 0..4 {
                assert!((s.get(2, j) - s2.get(2, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_softmax_is_lower_triangular_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = rand_matrix(&mut rng, 5, 5);
        let s = softmax_rows(&m, true);
        for i in 0..5 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for j in (i + 1)..5 {
                assert_eq!(s.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn spectral_norm_examples() {
        assert!((spectral_norm(&Matrix::identity(5)).unwrap() - 1.0).abs() < 1e-10);
        let d = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        assert!((spectral_norm(&d).unwrap() - 3.0).abs() < 1e-9);
        // Stochastic A = 1·e₁ᵀ has spectral norm √s.
        for s in [2usize, 3, 7] {
            let mut a = Matrix::zeros(s, s);
            for i in 0..s {
                a.set(i, 0, 1.0);
            }
            assert!((spectral_norm(&a).unwrap() - (s as f64).sqrt()).abs() < 1e-9);
        }
        // Top eigenvector orthogonal to the all-ones direction.
        let adversarial = Matrix::from_rows(&[&[5.0, -4.0], &[-4.0, 5.0]]);
        let sv = jacobi_svd_singular_values(&adversarial);
        assert!((spectral_norm(&adversarial).unwrap() - sv[0]).abs() < 1e-8);
    }

    #[test]
    fn spectral_norm_scales_exactly_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = rand_matrix(&mut rng, 4, 3);
        let a = spectral_norm(&m).unwrap();
        let b = spectral_norm(&m.scaled(5.0)).unwrap();
        assert!((b / a - 5.0).abs() < 1e-12);
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 4)), 0.0);
        assert!((frobenius_norm(&Matrix::identity(9)) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn min_singular_value_examples() {
        assert!((min_singular_value(&Matrix::identity(4)) - 1.0).abs() < 1e-10);
        let d = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        assert!((min_singular_value(&d) - 1.0).abs() < 1e-10);
        // Rank-deficient: exact zero (within eigensolver tolerance).
        let r = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(min_singular_value(&r) < 1e-7);
    }

    #[test]
    fn singular_values_match_jacobi_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (r, c) in [(4, 4), (5, 3), (3, 6)] {
            for _ in 0..20 {
                let m = rand_matrix(&mut rng, r, c);
                let sv = jacobi_svd_singular_values(&m);
                assert!((spectral_norm(&m).unwrap() - sv[0]).abs() < 1e-8);
                assert!((min_singular_value(&m) - sv[sv.len() - 1]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn stochastic_matrix_norm_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let s = rng.random_range(2..7);
            let mut a = Matrix::zeros(s, s);
            for i in 0..s {
                let mut row: Vec<f64> = (0..s).map(|_| rng.random_range(0.0..1.0)).collect();
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
                a.row_mut(i).copy_from_slice(&row);
            }
            let two = spectral_norm(&a).unwrap();
            let fro = frobenius_norm(&a);
            assert!(two <= fro + 1e-9);
            assert!(fro <= (s as f64).sqrt() + 1e-12);
        }
    }

    #[test]
    fn construction_rejects_bad_data() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0, 2.0, 3.0]),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_matrix(&mut rng, 3, 5);
        let b = rand_matrix(&mut rng, 5, 2);
        let c = a.matmul(&b);
        assert!(max_abs_diff(&c, &a.matmul_nt(&b.transpose())) < 1e-14);
        assert!(max_abs_diff(&c, &a.transpose().matmul_tn(&b)) < 1e-14);
    }
}
