//! A small tape-based reverse-mode differentiator over row-major `f64`
//! matrices, with exactly the operations the encoders and losses need.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks it in reverse. Nodes that depend on no gradient-requiring leaf are
//! skipped, so frozen weights cost nothing on the backward pass.

use crate::math::FeatureLossKind;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }
}

/// Below this many multiply-adds, packing overhead outweighs the blocked kernel.
const SMALL_GEMM: usize = 4096;

/// `C ← A·B + beta·C` with explicit (row, column) strides on every operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cs: usize, rows: usize, cols: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * r + (cols - 1) * cs + 1
        }
    };
    assert!(last(rsa, csa, m, k) <= a.len(), "gemm: A out of bounds");
    assert!(last(rsb, csb, k, n) <= b.len(), "gemm: B out of bounds");
    assert!(last(rsc, csc, m, n) <= c.len(), "gemm: C out of bounds");
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * rsa + p * csa] * b[p * rsb + j * csb];
                }
                let cij = &mut c[i * rsc + j * csc];
                *cij = if beta == 0.0 { acc } else { acc + beta * *cij };
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every element matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// A contiguous block of rows copied from another node.
#[derive(Debug, Clone, Copy)]
pub struct RowSpan {
    pub src: Var,
    pub start: usize,
    pub len: usize,
}

impl RowSpan {
    pub fn new(src: Var, start: usize, len: usize) -> Self {
        Self { src, start, len }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddTiled { a: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    QuickGelu { x: Var },
    Relu { x: Var },
    Attention { qkv: Var, seq: usize, heads: usize, probs: Vec<f64> },
    Gather { spans: Vec<RowSpan> },
    L2NormalizeRows { x: Var, eps: f64, norms: Vec<f64> },
    Scale { x: Var, factor: f64 },
    KdLoss { teacher: Var, student: Var, tau: f64, log_p: Vec<f64>, log_q: Vec<f64>, kl: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, tau: f64, probs: Vec<f64> },
    FeatureLoss { teacher: Var, student: Var, kind: FeatureLossKind },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const QUICK_GELU_A: f64 = 1.702;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// `a·b`, or `a·bᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        let (m, k) = am.shape();
        let (n, bs) = if trans_b {
            assert_eq!(bm.cols, k, "matmul inner dims");
            (bm.rows, (1, bm.cols))
        } else {
            assert_eq!(bm.rows, k, "matmul inner dims");
            (bm.cols, (bm.cols, 1))
        };
        let mut out = Matrix::zeros(m, n);
        gemm(m, k, n, &am.data, (k, 1), &bm.data, bs, 0.0, &mut out.data, (n, 1));
        self.push(out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shapes");
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    /// Adds `b` to `a`, repeating `b`'s rows down `a` (a bias when `b` has one row).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        let bm = self.value(b);
        assert_eq!(out.cols, bm.cols, "add_tiled cols");
        assert_eq!(out.rows % bm.rows, 0, "add_tiled rows");
        for r in 0..out.rows {
            let src = bm.row(r % bm.rows);
            out.row_mut(r).iter_mut().zip(src).for_each(|(o, s)| *o += s);
        }
        self.push(out, Op::AddTiled { a, b }, &[a, b])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let g = &self.value(gamma).data;
        let bt = &self.value(beta).data;
        assert_eq!(g.len(), cols);
        assert_eq!(bt.len(), cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + bt[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// `x·σ(1.702·x)`, the sigmoid approximation of GELU.
    pub fn quick_gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v *= sigmoid(QUICK_GELU_A * *v);
        }
        self.push(out, Op::QuickGelu { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    /// Multi-head self-attention over `qkv = [Q | K | V]` laid out as
    /// `(batch·seq) × 3·width`. Returns the concatenated head outputs.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize, causal: bool) -> Var {
        let m = self.value(qkv);
        let (rows, three_w) = m.shape();
        assert_eq!(three_w % 3, 0);
        assert_eq!(rows % seq, 0, "attention rows must be a multiple of seq");
        let width = three_w / 3;
        assert_eq!(width % heads, 0);
        let dh = width / heads;
        let batch = rows / seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = Matrix::zeros(rows, width);
        for b in 0..batch {
            let base = b * seq * three_w;
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                let q = &m.data[base + h * dh..];
                let k = &m.data[base + width + h * dh..];
                gemm(seq, dh, seq, q, (three_w, 1), k, (1, three_w), 0.0, p, (seq, 1));
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let limit = if causal { i + 1 } else { seq };
                    let mut max = f64::NEG_INFINITY;
                    for v in &mut row[..limit] {
                        *v *= scale;
                        max = max.max(*v);
                    }
                    let mut sum = 0.0;
                    for v in &mut row[..limit] {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    row[..limit].iter_mut().for_each(|v| *v /= sum);
                    row[limit..].iter_mut().for_each(|v| *v = 0.0);
                }
                let v = &m.data[base + 2 * width + h * dh..];
                let o = &mut out.data[b * seq * width + h * dh..];
                gemm(seq, seq, dh, p, (seq, 1), v, (three_w, 1), 0.0, o, (width, 1));
            }
        }
        self.push(out, Op::Attention { qkv, seq, heads, probs }, &[qkv])
    }

    /// Stacks row blocks taken from other nodes, in order.
    pub fn gather(&mut self, spans: Vec<RowSpan>) -> Var {
        assert!(!spans.is_empty());
        let cols = self.value(spans[0].src).cols;
        let rows: usize = spans.iter().map(|s| s.len).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for s in &spans {
            let m = self.value(s.src);
            assert_eq!(m.cols, cols, "gather column mismatch");
            assert!(s.start + s.len <= m.rows, "gather span out of range");
            data.extend_from_slice(&m.data[s.start * cols..(s.start + s.len) * cols]);
        }
        let inputs: Vec<Var> = spans.iter().map(|s| s.src).collect();
        self.push(Matrix::from_vec(rows, cols, data), Op::Gather { spans }, &inputs)
    }

    /// Row-wise `x / max(‖x‖, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = n.max(eps);
            row.iter_mut().for_each(|v| *v /= d);
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { x, eps, norms }, &[x])
    }

    /// `τ² · mean_b KL(σ(teacher_b/τ) ‖ σ(student_b/τ))`, a 1×1 node.
    pub fn kd_loss(&mut self, teacher: Var, student: Var, tau: f64) -> Var {
        let (t, s) = (self.value(teacher), self.value(student));
        assert_eq!(t.shape(), s.shape(), "kd_loss shapes");
        let (rows, cols) = t.shape();
        let mut log_p = vec![0.0; rows * cols];
        let mut log_q = vec![0.0; rows * cols];
        let mut kl = vec![0.0; rows];
        for r in 0..rows {
            let lp = log_softmax_row(t.row(r), tau);
            let lq = log_softmax_row(s.row(r), tau);
            kl[r] = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
            log_p[r * cols..(r + 1) * cols].copy_from_slice(&lp);
            log_q[r * cols..(r + 1) * cols].copy_from_slice(&lq);
        }
        let value = tau * tau * kl.iter().sum::<f64>() / rows as f64;
        self.push(
            Matrix::scalar(value),
            Op::KdLoss { teacher, student, tau, log_p, log_q, kl },
            &[teacher, student],
        )
    }

    /// Mean over rows of `−log σ(logits_b/τ)[labels_b]`, a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], tau: f64) -> Var {
        let m = self.value(logits);
        assert_eq!(m.rows, labels.len(), "one label per logit row");
        let mut probs = vec![0.0; m.rows * m.cols];
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            assert!(y < m.cols, "label out of range");
            let lp = log_softmax_row(m.row(r), tau);
            total -= lp[y];
            for (c, v) in lp.iter().enumerate() {
                probs[r * m.cols + c] = v.exp();
            }
        }
        let value = total / m.rows as f64;
        self.push(
            Matrix::scalar(value),
            Op::CrossEntropy { logits, labels: labels.to_vec(), tau, probs },
            &[logits],
        )
    }

    /// Mean absolute or squared difference over every element, a 1×1 node.
    pub fn feature_loss(&mut self, teacher: Var, student: Var, kind: FeatureLossKind) -> Var {
        let (t, s) = (self.value(teacher), self.value(student));
        assert_eq!(t.shape(), s.shape(), "feature_loss shapes");
        let n = t.data.len() as f64;
        let diffs = s.data.iter().zip(&t.data).map(|(a, b)| a - b);
        let value = match kind {
            FeatureLossKind::L1 => diffs.map(f64::abs).sum::<f64>() / n,
            FeatureLossKind::Mse => diffs.map(|d| d * d).sum::<f64>() / n,
        };
        self.push(
            Matrix::scalar(value),
            Op::FeatureLoss { teacher, student, kind },
            &[teacher, student],
        )
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let (m, k) = am.shape();
                let n = g.cols;
                if self.wants(*a) {
                    // dA = G·Bᵀ (or G·B when B was used transposed)
                    let mut da = Matrix::zeros(m, k);
                    let bs = if *trans_b { (bm.cols, 1) } else { (1, bm.cols) };
                    gemm(m, n, k, &g.data, (n, 1), &bm.data, bs, 0.0, &mut da.data, (k, 1));
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Matrix::zeros(bm.rows, bm.cols);
                    if *trans_b {
                        // dB = Gᵀ·A, shape n×k
                        gemm(n, m, k, &g.data, (1, n), &am.data, (k, 1), 0.0, &mut db.data, (k, 1));
                    } else {
                        // dB = Aᵀ·G, shape k×n
                        gemm(k, m, n, &am.data, (1, k), &g.data, (n, 1), 0.0, &mut db.data, (n, 1));
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddTiled { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let bm = self.value(*b);
                    let mut db = Matrix::zeros(bm.rows, bm.cols);
                    for r in 0..g.rows {
                        db.row_mut(r % bm.rows)
                            .iter_mut()
                            .zip(g.row(r))
                            .for_each(|(d, s)| *d += s);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, cols) = g.shape();
                let gm = &self.value(*gamma).data;
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gi = g.data[r * cols + c];
                            dg.data[c] += gi * xhat[r * cols + c];
                            db.data[c] += gi;
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = g.data[r * cols + c] * gm[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            let dh = g.data[r * cols + c] * gm[c];
                            let h = xhat[r * cols + c];
                            dx.data[r * cols + c] = rstd[r] * (dh - sum_dh / n - h * sum_dh_h / n);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::QuickGelu { x } => {
                let xm = self.value(*x);
                let mut dx = g.clone();
                for (d, &u) in dx.data.iter_mut().zip(&xm.data) {
                    let s = sigmoid(QUICK_GELU_A * u);
                    *d *= s + QUICK_GELU_A * u * s * (1.0 - s);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let xm = self.value(*x);
                let mut dx = g.clone();
                for (d, &u) in dx.data.iter_mut().zip(&xm.data) {
                    if u <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Scale { x, factor } => {
                let mut dx = g.clone();
                dx.data.iter_mut().for_each(|v| *v *= factor);
                self.accumulate(grads, *x, dx);
            }
            Op::Attention { qkv, seq, heads, probs } => {
                let m = self.value(*qkv);
                let (rows, three_w) = m.shape();
                let width = three_w / 3;
                let dh = width / heads;
                let (seq, heads) = (*seq, *heads);
                let batch = rows / seq;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = Matrix::zeros(rows, three_w);
                let mut dp = vec![0.0; seq * seq];
                for b in 0..batch {
                    let base = b * seq * three_w;
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let go = &g.data[b * seq * width + h * dh..];
                        let v = &m.data[base + 2 * width + h * dh..];
                        // dV = Pᵀ·dO
                        gemm(
                            seq, seq, dh, p, (1, seq), go, (width, 1), 0.0,
                            &mut dqkv.data[base + 2 * width + h * dh..], (three_w, 1),
                        );
                        // dP = dO·Vᵀ
                        gemm(seq, dh, seq, go, (width, 1), v, (1, three_w), 0.0, &mut dp, (seq, 1));
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (d, &pv) in dr.iter_mut().zip(pr) {
                                *d = pv * (*d - dot) * scale;
                            }
                        }
                        let q = &m.data[base + h * dh..];
                        let k = &m.data[base + width + h * dh..];
                        // dQ = dS·K
                        gemm(
                            seq, seq, dh, &dp, (seq, 1), k, (three_w, 1), 0.0,
                            &mut dqkv.data[base + h * dh..], (three_w, 1),
                        );
                        // dK = dSᵀ·Q
                        gemm(
                            seq, seq, dh, &dp, (1, seq), q, (three_w, 1), 0.0,
                            &mut dqkv.data[base + width + h * dh..], (three_w, 1),
                        );
                    }
                }
                self.accumulate(grads, *qkv, dqkv);
            }
            Op::Gather { spans } => {
                let cols = g.cols;
                let mut offset = 0;
                // Group contributions per source so each source gets one accumulation.
                let mut per_src: Vec<(Var, Matrix)> = Vec::new();
                for s in spans {
                    if self.wants(s.src) {
                        let pos = match per_src.iter().position(|(v, _)| *v == s.src) {
                            Some(p) => p,
                            None => {
                                let sm = self.value(s.src);
                                per_src.push((s.src, Matrix::zeros(sm.rows, sm.cols)));
                                per_src.len() - 1
                            }
                        };
                        let dst = &mut per_src[pos].1.data[s.start * cols..(s.start + s.len) * cols];
                        let src = &g.data[offset * cols..(offset + s.len) * cols];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                    offset += s.len;
                }
                for (v, m) in per_src {
                    self.accumulate(grads, v, m);
                }
            }
            Op::L2NormalizeRows { x, eps, norms } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let out = dx.row_mut(r);
                    if norms[r] >= *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..yr.len() {
                            out[c] = (gr[c] - yr[c] * dot) / norms[r];
                        }
                    } else {
                        for c in 0..yr.len() {
                            out[c] = gr[c] / eps;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::KdLoss { teacher, student, tau, log_p, log_q, kl } => {
                let upstream = g.data[0];
                let (rows, cols) = self.value(*student).shape();
                let coef = upstream * tau / rows as f64;
                if self.wants(*student) {
                    let mut ds = Matrix::zeros(rows, cols);
                    for i in 0..rows * cols {
                        ds.data[i] = coef * (log_q[i].exp() - log_p[i].exp());
                    }
                    self.accumulate(grads, *student, ds);
                }
                if self.wants(*teacher) {
                    let mut dt = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            dt.data[i] = coef * log_p[i].exp() * ((log_p[i] - log_q[i]) - kl[r]);
                        }
                    }
                    self.accumulate(grads, *teacher, dt);
                }
            }
            Op::CrossEntropy { logits, labels, tau, probs } => {
                let upstream = g.data[0];
                let (rows, cols) = self.value(*logits).shape();
                let coef = upstream / (tau * rows as f64);
                let mut d = Matrix::from_vec(rows, cols, probs.clone());
                for (r, &y) in labels.iter().enumerate() {
                    d.data[r * cols + y] -= 1.0;
                }
                d.data.iter_mut().for_each(|v| *v *= coef);
                self.accumulate(grads, *logits, d);
            }
            Op::FeatureLoss { teacher, student, kind } => {
                let upstream = g.data[0];
                let (t, s) = (self.value(*teacher), self.value(*student));
                let n = t.data.len() as f64;
                let ds: Vec<f64> = s
                    .data
                    .iter()
                    .zip(&t.data)
                    .map(|(a, b)| {
                        let d = a - b;
                        upstream
                            * match kind {
                                FeatureLossKind::L1 => {
                                    if d > 0.0 {
                                        1.0 / n
                                    } else if d < 0.0 {
                                        -1.0 / n
                                    } else {
                                        0.0
                                    }
                                }
                                FeatureLossKind::Mse => 2.0 * d / n,
                            }
                    })
                    .collect();
                if self.wants(*teacher) {
                    let dt = ds.iter().map(|v| -v).collect();
                    self.accumulate(grads, *teacher, Matrix::from_vec(t.rows, t.cols, dt));
                }
                self.accumulate(grads, *student, Matrix::from_vec(s.rows, s.cols, ds));
            }
        }
    }
}

fn log_softmax_row(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
    let lse = row.iter().map(|&x| (x / tau - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x / tau - lse).collect()
}

/// Gradients from one [`Graph::backward`] call, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of every input gradient of `build`.
    fn check(inputs: Vec<Matrix>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-5;
        for (i, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or(Matrix::zeros(m.rows, m.cols));
            for j in 0..m.data.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, mm)| {
                            let mut mm = mm.clone();
                            if k == i {
                                mm.data[j] += delta;
                            }
                            g.leaf(mm, false)
                        })
                        .collect();
                    let l = build(&mut g, &vars);
                    g.value(l).data[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5 || (a - numeric).abs() < 1e-9, "input {i} elem {j}: {a} vs {numeric}");
            }
        }
    }

    fn sum_weighted(g: &mut Graph, x: Var, seed: u64) -> Var {
        // Contract against a fixed random matrix so every output element matters.
        let (r, c) = g.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(random(&mut rng, r, c));
        g.feature_loss(w, x, FeatureLossKind::Mse)
    }

    #[test]
    fn matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 5);
        check(vec![a.clone(), b], |g, v| {
            let y = g.matmul(v[0], v[1], false);
            sum_weighted(g, y, 7)
        });
        let bt = random(&mut rng, 5, 4);
        check(vec![a, bt], |g, v| {
            let y = g.matmul(v[0], v[1], true);
            sum_weighted(g, y, 8)
        });
    }

    #[test]
    fn elementwise_and_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 4, 6);
        let gamma = random(&mut rng, 1, 6);
        let beta = random(&mut rng, 1, 6);
        let bias = random(&mut rng, 2, 6);
        check(vec![x, gamma, beta, bias], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            let y = g.quick_gelu(y);
            let y = g.add_tiled(y, v[3]);
            let y = g.scale(y, 1.7);
            let y = g.l2_normalize_rows(y, 1e-12);
            sum_weighted(g, y, 9)
        });
    }

    #[test]
    fn attention_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for causal in [false, true] {
            let qkv = random(&mut rng, 2 * 5, 3 * 4);
            check(vec![qkv], |g, v| {
                let y = g.attention(v[0], 5, 2, causal);
                sum_weighted(g, y, 10)
            });
        }
    }

    #[test]
    fn gather_and_losses_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 2, 4);
        check(vec![a.clone(), b.clone()], |g, v| {
            let y = g.gather(vec![RowSpan::new(v[0], 0, 1), RowSpan::new(v[1], 0, 2), RowSpan::new(v[0], 1, 2)]);
            let t = g.gather(vec![RowSpan::new(v[1], 1, 1), RowSpan::new(v[0], 2, 1), RowSpan::new(v[0], 0, 3)]);
            g.kd_loss(t, y, 1.5)
        });
        check(vec![a.clone()], |g, v| g.cross_entropy(v[0], &[1, 3, 0], 0.7));
        check(vec![a.clone(), random(&mut rng, 3, 4)], |g, v| g.feature_loss(v[0], v[1], FeatureLossKind::Mse));
        check(vec![a, random(&mut rng, 3, 4)], |g, v| {
            let r = g.relu(v[1]);
            g.feature_loss(v[0], r, FeatureLossKind::L1)
        });
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::scalar(2.0), false);
        let b = g.leaf(Matrix::scalar(3.0), true);
        let y = g.matmul(a, b, false);
        let t = g.constant(Matrix::scalar(0.0));
        let l = g.feature_loss(t, y, FeatureLossKind::Mse);
        let grads = g.backward(l);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data[0], 2.0 * 6.0 * 2.0);
    }
}
