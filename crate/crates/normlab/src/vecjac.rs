//! Matrix calculus under row-wise vectorization: Kronecker products,
//! commutation matrices, the block-diagonal softmax/normalization Jacobians,
//! and the central-difference oracle every analytic Jacobian is checked
//! against.
//!
//! Conventions (fixed throughout the crate):
//! - `vec_r(M)` concatenates the rows of `M`.
//! - A Jacobian of `Y = f(X)` is the dense matrix with entry `(i, j)` equal
//!   to `∂vec_r(Y)_i / ∂vec_r(X)_j` (numerator layout).
//! - For the linear map `W ↦ AWB`, the Jacobian is `A ⊗ Bᵀ`.
//! - `commutation_matrix(m, n) · vec_r(W) = vec_r(Wᵀ)` for every m×n `W`.

use crate::tensor::Matrix;
use thiserror::Error;

/// Dense-materialization cap per vectorized axis: the analytic Jacobians are
/// verified at desk scale only, and dense storage keeps every entry auditable.
pub const DENSE_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum VecJacError {
    #[error("row {0} is zero; the normalization Jacobian is undefined there")]
    ZeroRow(usize),
    #[error("zero vector has no RMS-normalization Jacobian")]
    ZeroVector,
    #[error("row {0} does not sum to 1 (got {1}); expected a softmax output")]
    NotStochastic(usize, f64),
    #[error("finite differences produced a non-finite value when perturbing entry ({0}, {1})")]
    NonFiniteProbe(usize, usize),
    #[error("dense Jacobian axis {0} exceeds the cap of {DENSE_CAP} entries")]
    DenseCapExceeded(usize),
}

/// Dense Jacobian of a matrix-to-matrix map, tagged with both endpoint shapes.
#[derive(Debug, Clone)]
pub struct Jacobian {
    pub out_rows: usize,
    pub out_cols: usize,
    pub in_rows: usize,
    pub in_cols: usize,
    matrix: Matrix,
}

impl Jacobian {
    pub fn new(out_shape: (usize, usize), in_shape: (usize, usize), matrix: Matrix) -> Self {
        assert_eq!(matrix.rows(), out_shape.0 * out_shape.1, "jacobian output axis mismatch");
        assert_eq!(matrix.cols(), in_shape.0 * in_shape.1, "jacobian input axis mismatch");
        Self {
            out_rows: out_shape.0,
            out_cols: out_shape.1,
            in_rows: in_shape.0,
            in_cols: in_shape.1,
            matrix,
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

/// Row-wise vectorization: concatenation of the rows of `M`.
pub fn vec_r(m: &Matrix) -> Vec<f64> {
    m.data().to_vec()
}

/// Standard Kronecker product; block (i, j) equals `A_ij · B`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (p, q) = (a.rows(), a.cols());
    let (r, s) = (b.rows(), b.cols());
    let mut out = Matrix::zeros(p * r, q * s);
    for i in 0..p {
        for j in 0..q {
            let aij = a.get(i, j);
            if aij == 0.0 {
                continue;
            }
            for k in 0..r {
                for l in 0..s {
                    out.set(i * r + k, j * s + l, aij * b.get(k, l));
                }
            }
        }
    }
    out
}

/// The mn×mn permutation with `K_{m,n} · vec_r(W) = vec_r(Wᵀ)` for m×n `W`.
pub fn commutation_matrix(m: usize, n: usize) -> Matrix {
    assert!(m >= 1 && n >= 1, "commutation matrix needs positive dimensions");
    let mut k = Matrix::zeros(m * n, m * n);
    for i in 0..m {
        for j in 0..n {
            // Entry W[i][j] sits at i·n+j in vec_r(W) and at j·m+i in vec_r(Wᵀ).
            k.set(j * m + i, i * n + j, 1.0);
        }
    }
    k
}

/// Square block-diagonal matrix stored as its diagonal blocks, with a dense
/// view for oracle comparison.
#[derive(Debug, Clone)]
pub struct BlockDiagonal {
    blocks: Vec<Matrix>,
}

impl BlockDiagonal {
    pub fn new(blocks: Vec<Matrix>) -> Self {
        for b in &blocks {
            assert_eq!(b.rows(), b.cols(), "block-diagonal blocks must be square");
        }
        Self { blocks }
    }

    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(Matrix::rows).sum()
    }

    pub fn dense(&self) -> Matrix {
        let n = self.dim();
        let mut out = Matrix::zeros(n, n);
        let mut off = 0;
        for b in &self.blocks {
            for i in 0..b.rows() {
                for j in 0..b.cols() {
                    out.set(off + i, off + j, b.get(i, j));
                }
            }
            off += b.rows();
        }
        out
    }
}

/// Block-diagonal Jacobian of row-wise softmax at a row-stochastic `A`:
/// the i-th block is `diag(A_i) − A_i A_iᵀ`.
pub fn softmax_jacobian(a: &Matrix) -> Result<BlockDiagonal, VecJacError> {
    let n = a.cols();
    let mut blocks = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let row = a.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(VecJacError::NotStochastic(i, sum));
        }
        let mut block = Matrix::zeros(n, n);
        for j in 0..n {
            for k in 0..n {
                let v = if j == k { row[j] * (1.0 - row[j]) } else { -row[j] * row[k] };
                block.set(j, k, v);
            }
        }
        blocks.push(block);
    }
    Ok(BlockDiagonal::new(blocks))
}

/// Analytic Jacobian of RMS normalization at `x` with α=1, eps=0:
/// `(√d/‖x‖₂)(I − xxᵀ/‖x‖₂²)`.
pub fn rmsnorm_jacobian(x: &[f64]) -> Result<Matrix, VecJacError> {
    let d = x.len();
    let norm_sq: f64 = x.iter().map(|v| v * v).sum();
    if norm_sq == 0.0 {
        return Err(VecJacError::ZeroVector);
    }
    let norm = norm_sq.sqrt();
    let scale = (d as f64).sqrt() / norm;
    let mut j = Matrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            let delta = if a == b { 1.0 } else { 0.0 };
            j.set(a, b, scale * (delta - x[a] * x[b] / norm_sq));
        }
    }
    Ok(j)
}

/// Jacobian of row-wise RMS normalization of an s×d matrix: block-diagonal
/// with per-row `rmsnorm_jacobian` blocks; off-block entries are exactly zero.
pub fn rownorm_jacobian(x: &Matrix) -> Result<BlockDiagonal, VecJacError> {
    let mut blocks = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let block = rmsnorm_jacobian(x.row(i)).map_err(|_| VecJacError::ZeroRow(i))?;
        blocks.push(block);
    }
    Ok(BlockDiagonal::new(blocks))
}

/// Jacobian of the linear map `W ↦ AWB` in vec_r layout: `A ⊗ Bᵀ`, of shape
/// (m·q) × (n·p) for A m×n and B p×q.
pub fn linear_map_jacobian(a: &Matrix, b: &Matrix) -> Jacobian {
    let j = kron(a, &b.transpose());
    Jacobian::new((a.rows(), b.cols()), (a.cols(), b.rows()), j)
}

/// Central-difference Jacobian oracle: perturbs every entry of `x` by ±h and
/// assembles `(f(X+hE_ij) − f(X−hE_ij))/(2h)` in vec_r layout.
pub fn finite_diff_jacobian(
    f: &dyn Fn(&Matrix) -> Matrix,
    x: &Matrix,
    h: f64,
) -> Result<Jacobian, VecJacError> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let y0 = f(x);
    let out_len = y0.rows() * y0.cols();
    let in_len = x.rows() * x.cols();
    if out_len > DENSE_CAP {
        return Err(VecJacError::DenseCapExceeded(out_len));
    }
    if in_len > DENSE_CAP {
        return Err(VecJacError::DenseCapExceeded(in_len));
    }
    let mut j = Matrix::zeros(out_len, in_len);
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let mut xp = x.clone();
            xp.set(r, c, x.get(r, c) + h);
            let yp = f(&xp);
            let mut xm = x.clone();
            xm.set(r, c, x.get(r, c) - h);
            let ym = f(&xm);
            let col = r * x.cols() + c;
            for i in 0..out_len {
                let v = (yp.data()[i] - ym.data()[i]) / (2.0 * h);
                if !v.is_finite() {
                    return Err(VecJacError::NonFiniteProbe(r, c));
                }
                j.set(i, col, v);
            }
        }
    }
    Ok(Jacobian::new((y0.rows(), y0.cols()), (x.rows(), x.cols()), j))
}

/// Default central-difference step (balances truncation against round-off for
/// unit-variance value magnitudes in 64-bit).
pub const FD_STEP: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, softmax_rows, spectral_norm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_raw(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn vec_r_is_row_concatenation() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(vec_r(&m), vec![1.0, 2.0, 3.0, 4.0]);
        let row = Matrix::from_rows(&[&[5.0, 6.0, 7.0]]);
        assert_eq!(vec_r(&row), vec![5.0, 6.0, 7.0]);
    }

    #[test]
    fn commutation_matrix_frozen_examples() {
        // K_{1,n} = I_n.
        assert!(max_abs_diff(&commutation_matrix(1, 4), &Matrix::identity(4)) == 0.0);
        // K_{2,2} swaps the middle two coordinates.
        let k = commutation_matrix(2, 2);
        let expected = Matrix::from_rows(&[
            &[1.0, 0.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 0.0],
            &[0.0, 1.0, 0.0, 0.0],
            &[0.0, 0.0, 0.0, 1.0],
        ]);
        assert_eq!(max_abs_diff(&k, &expected), 0.0);
    }

    #[test]
    fn commutation_transposes_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in 1..=4usize {
            for n in 1..=4usize {
                let w = rand_matrix(&mut rng, m, n);
                let k = commutation_matrix(m, n);
                let lhs = k.matmul(&Matrix::from_raw(m * n, 1, vec_r(&w)));
                let rhs = vec_r(&w.transpose());
                for (a, b) in lhs.data().iter().zip(&rhs) {
                    assert_eq!(a, b);
                }
                // K_{m,n} K_{n,m} = I.
                let prod = k.matmul(&commutation_matrix(n, m));
                assert_eq!(max_abs_diff(&prod, &Matrix::identity(m * n)), 0.0);
                // Permutation: exactly one 1 per row and column.
                for i in 0..m * n {
                    assert_eq!(k.row(i).iter().filter(|&&v| v == 1.0).count(), 1);
                    assert_eq!(k.row(i).iter().filter(|&&v| v != 0.0).count(), 1);
                    assert_eq!((0..m * n).filter(|&r| k.get(r, i) == 1.0).count(), 1);
                }
            }
        }
    }

    #[test]
    fn kron_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let i2 = Matrix::identity(2);
        let b = rand_matrix(&mut rng, 2, 3);
        let k = kron(&i2, &b);
        assert_eq!(k.get(0, 0), b.get(0, 0));
        assert_eq!(k.get(2, 3), b.get(0, 0));
        assert_eq!(k.get(3, 5), b.get(1, 2));
        assert_eq!(k.get(0, 3), 0.0);

        for _ in 0..20 {
            let a = rand_matrix(&mut rng, 2, 2);
            let b = rand_matrix(&mut rng, 2, 2);
            let d = rand_matrix(&mut rng, 2, 2);
            let e = rand_matrix(&mut rng, 2, 2);
            // (A⊗B)(D⊗E) = (AD)⊗(BE).
            let lhs = kron(&a, &b).matmul(&kron(&d, &e));
            let rhs = kron(&a.matmul(&d), &b.matmul(&e));
            assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
            // tr(A⊗B) = tr(A)·tr(B).
            let tr = |m: &Matrix| (0..m.rows()).map(|i| m.get(i, i)).sum::<f64>();
            assert!((tr(&kron(&a, &b)) - tr(&a) * tr(&b)).abs() < 1e-12);
        }
    }

    #[test]
    fn vec_r_of_axb_is_kron_times_vec_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let a = rand_matrix(&mut rng, 3, 2);
            let x = rand_matrix(&mut rng, 2, 4);
            let b = rand_matrix(&mut rng, 4, 3);
            let lhs = vec_r(&a.matmul(&x).matmul(&b));
            let j = kron(&a, &b.transpose());
            let rhs = j.matmul(&Matrix::from_raw(8, 1, vec_r(&x)));
            for (l, r) in lhs.iter().zip(rhs.data()) {
                assert!((l - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_jacobian_frozen_block() {
        let a = Matrix::from_rows(&[&[0.5, 0.5]]);
        let j = softmax_jacobian(&a).unwrap();
        let expected = Matrix::from_rows(&[&[0.25, -0.25], &[-0.25, 0.25]]);
        assert!(max_abs_diff(&j.blocks()[0], &expected) < 1e-15);
        assert!((spectral_norm(&j.dense()).unwrap() - 0.5).abs() < 1e-10);

        let onehot = Matrix::from_rows(&[&[1.0, 0.0]]);
        let j = softmax_jacobian(&onehot).unwrap();
        assert_eq!(max_abs_diff(&j.blocks()[0], &Matrix::zeros(2, 2)), 0.0);

        let bad = Matrix::from_rows(&[&[0.7, 0.7]]);
        assert!(matches!(softmax_jacobian(&bad), Err(VecJacError::NotStochastic(0, _))));
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10 {
            let logits = rand_matrix(&mut rng, 3, 3);
            let probs = softmax_rows(&logits, false);
            let analytic = softmax_jacobian(&probs).unwrap().dense();
            let fd = finite_diff_jacobian(&|m| softmax_rows(m, false), &logits, FD_STEP).unwrap();
            assert!(max_abs_diff(&analytic, fd.matrix()) < 1e-7);
        }
    }

    #[test]
    fn softmax_probability_half_bound_with_equality() {
        // ‖diag(p) − ppᵀ‖₂ ≤ 1/2 with equality at p = (1/2, 1/2, 0, ...).
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let n = rng.random_range(2..6);
            let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let sum: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= sum);
            let a = Matrix::from_raw(1, n, p);
            let j = softmax_jacobian(&a).unwrap();
            assert!(spectral_norm(&j.blocks()[0]).unwrap() <= 0.5 + 1e-10);
        }
        let mut peak = vec![0.0; 5];
        peak[0] = 0.5;
        peak[1] = 0.5;
        let a = Matrix::from_raw(1, 5, peak);
        let j = softmax_jacobian(&a).unwrap();
        assert!((spectral_norm(&j.blocks()[0]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rmsnorm_jacobian_frozen_and_radial_annihilation() {
        let j = rmsnorm_jacobian(&[1.0, 1.0]).unwrap();
        let expected = Matrix::from_rows(&[&[0.5, -0.5], &[-0.5, 0.5]]);
        assert!(max_abs_diff(&j, &expected) < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let j = rmsnorm_jacobian(&x).unwrap();
            let jx = j.matmul(&Matrix::from_raw(5, 1, x.clone()));
            assert!(jx.data().iter().all(|v| v.abs() < 1e-12), "J·x = 0");
        }
        assert!(matches!(rmsnorm_jacobian(&[0.0, 0.0]), Err(VecJacError::ZeroVector)));
    }

    #[test]
    fn rmsnorm_jacobian_matches_finite_differences() {
        use crate::tensor::{rms_norm, NormParams};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = NormParams::ones(5, 0.0);
        for _ in 0..10 {
            let x = rand_matrix(&mut rng, 1, 5);
            let analytic = rmsnorm_jacobian(x.row(0)).unwrap();
            let f = |m: &Matrix| Matrix::from_raw(1, 5, rms_norm(m.row(0), &p));
            let fd = finite_diff_jacobian(&f, &x, FD_STEP).unwrap();
            assert!(max_abs_diff(&analytic, fd.matrix()) < 1e-7);
        }
    }

    #[test]
    fn rownorm_jacobian_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = rand_matrix(&mut rng, 3, 4);
        let bd = rownorm_jacobian(&x).unwrap();
        assert_eq!(bd.blocks().len(), 3);
        // s = 1 reduces to rmsnorm_jacobian.
        let single = Matrix::from_raw(1, 4, x.row(0).to_vec());
        let bd1 = rownorm_jacobian(&single).unwrap();
        assert_eq!(max_abs_diff(&bd1.dense(), &rmsnorm_jacobian(x.row(0)).unwrap()), 0.0);
        // Identical rows give identical blocks.
        let rep = Matrix::from_rows(&[x.row(0), x.row(0)]);
        let bdr = rownorm_jacobian(&rep).unwrap();
        assert_eq!(max_abs_diff(&bdr.blocks()[0], &bdr.blocks()[1]), 0.0);
        // Off-block entries exactly zero.
        let dense = bd.dense();
        for i in 0..12 {
            for j in 0..12 {
                if i / 4 != j / 4 {
                    assert_eq!(dense.get(i, j), 0.0);
                }
            }
        }
        // Zero row errors with its index.
        let mut with_zero = x.clone();
        with_zero.row_mut(1).fill(0.0);
        assert!(matches!(rownorm_jacobian(&with_zero), Err(VecJacError::ZeroRow(1))));
    }

    #[test]
    fn rownorm_jacobian_matches_finite_differences() {
        use crate::tensor::{rms_norm_rows, NormParams};
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = NormParams::ones(4, 0.0);
        let x = rand_matrix(&mut rng, 3, 4);
        let analytic = rownorm_jacobian(&x).unwrap().dense();
        let fd = finite_diff_jacobian(&|m| rms_norm_rows(m, &p), &x, FD_STEP).unwrap();
        assert!(max_abs_diff(&analytic, fd.matrix()) < 1e-7);
    }

    #[test]
    fn linear_map_jacobian_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let a = rand_matrix(&mut rng, 2, 3);
        let b = rand_matrix(&mut rng, 2, 2);
        let j = linear_map_jacobian(&a, &b);
        assert_eq!((j.out_rows, j.out_cols), (2, 2));
        assert_eq!((j.in_rows, j.in_cols), (3, 2));
        let w = rand_matrix(&mut rng, 3, 2);
        let fd = finite_diff_jacobian(&|w| a.matmul(w).matmul(&b), &w, FD_STEP).unwrap();
        assert!(max_abs_diff(j.matrix(), fd.matrix()) < 1e-9);

        let id = linear_map_jacobian(&Matrix::identity(3), &Matrix::identity(3));
        assert_eq!(max_abs_diff(id.matrix(), &Matrix::identity(9)), 0.0);
    }

    #[test]
    fn finite_diff_identity_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_matrix(&mut rng, 2, 3);
        // Identity is linear, so the central difference is truncation-free at
        // any step; a power-of-two step keeps x ± h cancellation-free too.
        let fd = finite_diff_jacobian(&|m| m.clone(), &x, 0.5).unwrap();
        assert!(max_abs_diff(fd.matrix(), &Matrix::identity(6)) < 1e-12);

        let blowup = |m: &Matrix| {
            let mut out = m.clone();
            if m.get(0, 0) > x.get(0, 0) + FD_STEP / 2.0 {
                out.set(0, 0, f64::NAN);
            }
            out
        };
        assert!(matches!(
            finite_diff_jacobian(&blowup, &x, FD_STEP),
            Err(VecJacError::NonFiniteProbe(0, 0))
        ));

        let big = Matrix::zeros(1, DENSE_CAP + 1);
        assert!(matches!(
            finite_diff_jacobian(&|m| m.clone(), &big, FD_STEP),
            Err(VecJacError::DenseCapExceeded(_))
        ));
    }
}
