//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records operations eagerly: each method computes its value on
//! the spot and pushes a node describing how to backpropagate through it.
//! [`Tape::backward`] then walks the nodes in reverse, accumulating exact
//! gradients for every node including the leaves. The op set is exactly what
//! the transformer stack needs: matrix products (optionally with a
//! transposed right operand), elementwise add/multiply, SiLU, scalar
//! scaling, gained row-wise RMS normalization, row softmax with optional
//! causal mask, column slicing/concatenation (for head splits), rotary
//! position encoding, embedding lookup, and mean cross-entropy.

use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Hadamard(Var, Var),
    Silu(Var),
    Scale(Var, f64),
    RmsNormRows { x: Var, gain: Var, eps: f64 },
    SoftmaxRows { x: Var, causal: bool },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Rope { x: Var, theta: f64 },
    Embed { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

/// Eager computation tape with reverse-mode gradients.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Matrix>,
    ops: Vec<Op>,
    grads: Vec<Matrix>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> &Matrix {
        assert!(!self.grads.is_empty(), "backward has not been run");
        &self.grads[v.0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].add(&self.values[b.0]);
        self.push(value, Op::Add(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].matmul(&self.values[b.0]);
        self.push(value, Op::MatMul { a, b, trans_b: false })
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].matmul_nt(&self.values[b.0]);
        self.push(value, Op::MatMul { a, b, trans_b: true })
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].hadamard(&self.values[b.0]);
        self.push(value, Op::Hadamard(a, b))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let m = &self.values[x.0];
        let mut value = m.clone();
        for v in value.data_mut() {
            *v *= sigmoid(*v);
        }
        self.push(value, Op::Silu(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.values[x.0].scaled(c);
        self.push(value, Op::Scale(x, c))
    }

    /// Row-wise RMS normalization `y_ij = gain_j · x_ij / r_i` with
    /// `r_i = √(mean_j x_ij² + eps)`. `gain` must hold a 1×cols matrix.
    /// An exactly zero row with eps = 0 maps to zero and backpropagates zero.
    pub fn rms_norm_rows(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let m = &self.values[x.0];
        let g = &self.values[gain.0];
        assert_eq!(g.rows(), 1, "gain must be a row vector");
        assert_eq!(g.cols(), m.cols(), "gain width must match");
        let n = m.cols() as f64;
        let mut value = Matrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            let row = m.row(i);
            let r = (row.iter().map(|v| v * v).sum::<f64>() / n + eps).sqrt();
            if r > 0.0 {
                let out = value.row_mut(i);
                for j in 0..row.len() {
                    out[j] = g.get(0, j) * row[j] / r;
                }
            }
        }
        self.push(value, Op::RmsNormRows { x, gain, eps })
    }

    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let value = crate::tensor::softmax_rows(&self.values[x.0], causal);
        self.push(value, Op::SoftmaxRows { x, causal })
    }

    /// Columns `[start, start+len)` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = &self.values[x.0];
        assert!(start + len <= m.cols(), "slice out of range");
        let mut value = Matrix::zeros(m.rows(), len);
        for i in 0..m.rows() {
            value.row_mut(i).copy_from_slice(&m.row(i)[start..start + len]);
        }
        self.push(value, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.values[parts[0].0].rows();
        let cols = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let m = &self.values[p.0];
            assert_eq!(m.rows(), rows, "concat parts must share row count");
            for i in 0..rows {
                value.row_mut(i)[at..at + m.cols()].copy_from_slice(m.row(i));
            }
            at += m.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Rotary position encoding over coordinate pairs, row index = position.
    pub fn rope(&mut self, x: Var, theta: f64) -> Var {
        let mut value = self.values[x.0].clone();
        crate::attention::rope_rows(&mut value, theta);
        self.push(value, Op::Rope { x, theta })
    }

    /// Rows of `table` selected by token id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = &self.values[table.0];
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < t.rows(), "token id {id} out of range");
            value.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(value, Op::Embed { table, ids: ids.to_vec() })
    }

    /// Mean cross-entropy over positions: 1×1 value
    /// `(1/s) Σ_i [logsumexp(logits_i) − logits_i[target_i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let m = &self.values[logits.0];
        assert_eq!(m.rows(), targets.len(), "one target per position");
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < m.cols(), "target id {t} out of range");
            let row = m.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Matrix::from_raw(1, 1, vec![total / targets.len() as f64]);
        self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec() })
    }

    /// Reverse pass from a scalar (1×1) node. Gradients of every node,
    /// leaves included, are available through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) {
        let v = &self.values[loss.0];
        assert_eq!((v.rows(), v.cols()), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Matrix> =
            self.values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        grads[loss.0].set(0, 0, 1.0);

        let ops = std::mem::take(&mut self.ops);
        for (idx, op) in ops.iter().enumerate().rev() {
            if grads[idx].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let dy = grads[idx].clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[a.0] = grads[a.0].add(&dy);
                    grads[b.0] = grads[b.0].add(&dy);
                }
                Op::MatMul { a, b, trans_b } => {
                    let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                    if *trans_b {
                        // C = A·Bᵀ: dA += dC·B, dB += dCᵀ·A.
                        grads[a.0] = grads[a.0].add(&dy.matmul(vb));
                        grads[b.0] = grads[b.0].add(&dy.matmul_tn(va));
                    } else {
                        // C = A·B: dA += dC·Bᵀ, dB += Aᵀ·dC.
                        grads[a.0] = grads[a.0].add(&dy.matmul_nt(vb));
                        grads[b.0] = grads[b.0].add(&va.matmul_tn(&dy));
                    }
                }
                Op::Hadamard(a, b) => {
                    grads[a.0] = grads[a.0].add(&dy.hadamard(&self.values[b.0]));
                    grads[b.0] = grads[b.0].add(&dy.hadamard(&self.values[a.0]));
                }
                Op::Silu(x) => {
                    let vx = &self.values[x.0];
                    let dx = grads[x.0].data_mut();
                    for (k, &z) in vx.data().iter().enumerate() {
                        let s = sigmoid(z);
                        dx[k] += dy.data()[k] * (s + z * s * (1.0 - s));
                    }
                }
                Op::Scale(x, c) => {
                    grads[x.0] = grads[x.0].add(&dy.scaled(*c));
                }
                Op::RmsNormRows { x, gain, eps } => {
                    let vx = &self.values[x.0];
                    let g = &self.values[gain.0];
                    let n = vx.cols() as f64;
                    let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                    let mut dg = Matrix::zeros(1, vx.cols());
                    for i in 0..vx.rows() {
                        let row = vx.row(i);
                        let r = (row.iter().map(|v| v * v).sum::<f64>() / n + eps).sqrt();
                        if r == 0.0 {
                            continue;
                        }
                        let dyr = dy.row(i);
                        let dot: f64 =
                            (0..row.len()).map(|j| dyr[j] * g.get(0, j) * row[j]).sum();
                        let out = dx.row_mut(i);
                        for j in 0..row.len() {
                            out[j] = g.get(0, j) * dyr[j] / r - row[j] * dot / (n * r.powi(3));
                            dg.row_mut(0)[j] += dyr[j] * row[j] / r;
                        }
                    }
                    grads[x.0] = grads[x.0].add(&dx);
                    grads[gain.0] = grads[gain.0].add(&dg);
                }
                Op::SoftmaxRows { x, causal } => {
                    let a = &self.values[idx];
                    let mut dx = Matrix::zeros(a.rows(), a.cols());
                    for i in 0..a.rows() {
                        let limit = if *causal { i + 1 } else { a.cols() };
                        let ar = a.row(i);
                        let dyr = dy.row(i);
                        let dot: f64 = (0..limit).map(|k| ar[k] * dyr[k]).sum();
                        let out = dx.row_mut(i);
                        for j in 0..limit {
                            out[j] = ar[j] * (dyr[j] - dot);
                        }
                    }
                    grads[x.0] = grads[x.0].add(&dx);
                }
                Op::SliceCols { x, start } => {
                    let dx = grads[x.0].data_mut();
                    let cols = self.values[x.0].cols();
                    for i in 0..dy.rows() {
                        for j in 0..dy.cols() {
                            dx[i * cols + start + j] += dy.get(i, j);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.values[p.0].cols();
                        let dp = grads[p.0].data_mut();
                        let cols = dy.cols();
                        for i in 0..dy.rows() {
                            for j in 0..w {
                                dp[i * w + j] += dy.data()[i * cols + at + j];
                            }
                        }
                        at += w;
                    }
                }
                Op::Rope { x, theta } => {
                    // The rotation is orthogonal, so the adjoint is the
                    // inverse rotation: negate every angle.
                    let d_k = dy.cols();
                    let mut dx = dy.clone();
                    for pos in 0..dx.rows() {
                        let row = dx.row_mut(pos);
                        for j in 0..d_k / 2 {
                            let angle =
                                pos as f64 * theta.powf(-2.0 * j as f64 / d_k as f64);
                            let (sin, cos) = angle.sin_cos();
                            let (a, b) = (row[2 * j], row[2 * j + 1]);
                            row[2 * j] = a * cos + b * sin;
                            row[2 * j + 1] = -a * sin + b * cos;
                        }
                    }
                    grads[x.0] = grads[x.0].add(&dx);
                }
                Op::Embed { table, ids } => {
                    let dt = grads[table.0].data_mut();
                    let cols = dy.cols();
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            dt[id * cols + j] += dy.get(i, j);
                        }
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let m = &self.values[logits.0];
                    let seed = dy.get(0, 0) / targets.len() as f64;
                    let dl = grads[logits.0].data_mut();
                    let cols = m.cols();
                    for (i, &t) in targets.iter().enumerate() {
                        let row = m.row(i);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..cols {
                            let p = (row[j] - max).exp() / denom;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[i * cols + j] += (p - onehot) * seed;
                        }
                    }
                }
            }
        }
        self.ops = ops;
        self.grads = grads;
    }
}
