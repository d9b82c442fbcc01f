//! Reverse-mode tape.
//!
//! Nodes are appended in execution order; `backward` walks them once in
//! reverse. Each node keeps whatever its local gradient needs (softmax
//! probabilities, normalised activations, dropout masks).

use rand::Rng as _;

use super::ops::{gelu_grad, gelu_scalar, gemm_acc, layer_norm_rows, log_softmax_rows, softmax_rows, GeluKind};
use super::Tensor;
use crate::rng::Rng;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multi-head self-attention layout for a padded batch.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// `batch * seq` flags; keys at `false` positions receive no weight.
    pub key_valid: Vec<bool>,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Gelu { a: Var, kind: GeluKind },
    Tanh { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<f64>, drop: Option<Vec<f64>> },
    SoftCrossEntropy { logits: Var, targets: Tensor, probs: Tensor },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    Sum { a: Var },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims2(t: &Tensor, what: &str) -> (usize, usize) {
    match t.shape() {
        [m, n] => (*m, *n),
        s => panic!("{what}: expected a matrix, got shape {s:?}"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a), "matmul lhs");
        let (k2, n) = dims2(self.value(b), "matmul rhs");
        assert_eq!(k, k2, "matmul shape mismatch: {:?} x {:?}", self.value(a).shape(), self.value(b).shape());
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        self.push(Tensor::new([m, n], out), Op::MatMul { a, b })
    }

    /// `a * b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a), "matmul_nt lhs");
        let (n, k2) = dims2(self.value(b), "matmul_nt rhs");
        assert_eq!(k, k2, "matmul_nt shape mismatch: {:?} x {:?}^T", self.value(a).shape(), self.value(b).shape());
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out);
        self.push(Tensor::new([m, n], out), Op::MatMulNt { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch: {:?} vs {:?}", x.shape(), y.shape());
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Add { a, b })
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        let (_, cols) = x.rows_cols();
        assert_eq!(b.shape(), [cols], "add_row shape mismatch: {:?} + {:?}", x.shape(), b.shape());
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        let shape = x.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::AddRow { a, bias })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch: {:?} vs {:?}", x.shape(), y.shape());
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let out = x.data().iter().map(|v| v * s).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Scale { a, s })
    }

    pub fn gelu(&mut self, a: Var, kind: GeluKind) -> Var {
        let x = self.value(a);
        let out = x.data().iter().map(|&v| gelu_scalar(v, kind)).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Gelu { a, kind })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = x.data().iter().map(|v| v.tanh()).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Tanh { a })
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax { a })
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (_, cols) = self.value(x).rows_cols();
        assert_eq!(self.value(gamma).shape(), [cols], "layer_norm gamma shape {:?} vs width {cols}", self.value(gamma).shape());
        assert_eq!(self.value(beta).shape(), [cols], "layer_norm beta shape {:?} vs width {cols}", self.value(beta).shape());
        let (xhat, inv_std) = layer_norm_rows(self.value(x), eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.data().to_vec();
        for row in out.chunks_mut(cols) {
            for ((o, gg), bb) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        let shape = xhat.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Inverted dropout. The identity (no node) when not training or
    /// `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng, train: bool) -> Var {
        if !train || rate <= 0.0 {
            return a;
        }
        assert!(rate < 1.0, "dropout rate must be < 1, got {rate}");
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Dropout { a, mask })
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let (rows, cols) = dims2(t, "embedding table");
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            assert!(i < rows, "embedding id {i} out of range for table {:?}", t.shape());
            out.extend_from_slice(t.row(i));
        }
        self.push(Tensor::new([ids.len(), cols], out), Op::Embedding { table, ids: ids.to_vec() })
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = self.value(a);
        let (n, cols) = dims2(x, "gather_rows");
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            assert!(r < n, "gather row {r} out of range for {:?}", x.shape());
            out.extend_from_slice(x.row(r));
        }
        self.push(Tensor::new([rows.len(), cols], out), Op::GatherRows { a, rows: rows.to_vec() })
    }

    /// Scaled dot-product attention over `[batch * seq, hidden]` projections,
    /// split into `layout.heads` heads, with dropout on the attention
    /// probabilities.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout, dropout: f64, rng: &mut Rng, train: bool) -> Var {
        let (rows, d) = dims2(self.value(q), "attention q");
        let AttentionLayout { batch, seq, heads, .. } = layout;
        assert_eq!(rows, batch * seq, "attention rows {rows} != batch {batch} x seq {seq}");
        assert_eq!(self.value(k).shape(), [rows, d], "attention k shape");
        assert_eq!(self.value(v).shape(), [rows, d], "attention v shape");
        assert_eq!(layout.key_valid.len(), rows, "attention mask length");
        assert!(heads > 0 && d % heads == 0, "hidden {d} not divisible by heads {heads}");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let tt = seq * seq;
        let mut probs = vec![0.0; batch * heads * tt];
        for b in 0..batch {
            let valid = &layout.key_valid[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if valid[j] {
                            let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                            let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                            row[j] = s;
                            m = m.max(s);
                        }
                    }
                    let mut sum = 0.0;
                    for j in 0..seq {
                        if valid[j] {
                            row[j] = (row[j] - m).exp();
                            sum += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    for x in row.iter_mut() {
                        *x /= sum;
                    }
                }
            }
        }
        let drop = (train && dropout > 0.0).then(|| {
            let keep = 1.0 / (1.0 - dropout);
            (0..probs.len()).map(|_| if rng.random::<f64>() < dropout { 0.0 } else { keep }).collect::<Vec<f64>>()
        });
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * tt..][..tt];
                let dm = drop.as_ref().map(|m| &m[(b * heads + h) * tt..][..tt]);
                for i in 0..seq {
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..seq {
                        let w = p[i * seq + j] * dm.map_or(1.0, |m| m[i * seq + j]);
                        if w != 0.0 {
                            let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                            for (oo, vv) in o.iter_mut().zip(vj) {
                                *oo += w * vv;
                            }
                        }
                    }
                }
            }
        }
        self.push(Tensor::new([rows, d], out), Op::Attention { q, k, v, layout, probs, drop })
    }

    /// Mean over rows of `-sum(target * log_softmax(logits))`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "soft_cross_entropy shape mismatch: logits {:?} vs targets {:?}", z.shape(), targets.shape());
        let (rows, _) = z.rows_cols();
        let logp = log_softmax_rows(z);
        let total: f64 = logp.data().iter().zip(targets.data()).map(|(l, t)| if *t == 0.0 { 0.0 } else { -t * l }).sum();
        let probs = Tensor::new(logp.shape().to_vec(), logp.data().iter().map(|l| l.exp()).collect());
        let loss = if rows == 0 { 0.0 } else { total / rows as f64 };
        self.push(Tensor::scalar(loss), Op::SoftCrossEntropy { logits, targets: targets.clone(), probs })
    }

    /// Mean over rows of `-log_softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = self.value(logits);
        let (rows, cols) = dims2(z, "cross_entropy logits");
        assert_eq!(rows, labels.len(), "cross_entropy: {rows} rows vs {} labels", labels.len());
        let logp = log_softmax_rows(z);
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            assert!(l < cols, "label {l} out of range for {cols} classes");
            total -= logp.data()[r * cols + l];
        }
        let probs = Tensor::new(logp.shape().to_vec(), logp.data().iter().map(|l| l.exp()).collect());
        let loss = if rows == 0 { 0.0 } else { total / rows as f64 };
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output, got {:?}", self.value(output).shape());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape().to_vec(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()))
            .data_mut()
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = dims2(self.value(*a), "");
                let n = node.value.shape()[1];
                gemm_acc(m, n, k, gd, false, self.value(*b).data(), true, self.grad_buf(grads, *a));
                gemm_acc(k, m, n, self.value(*a).data(), true, gd, false, self.grad_buf(grads, *b));
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = dims2(self.value(*a), "");
                let n = node.value.shape()[1];
                gemm_acc(m, n, k, gd, false, self.value(*b).data(), false, self.grad_buf(grads, *a));
                gemm_acc(n, m, k, gd, true, self.value(*a).data(), false, self.grad_buf(grads, *b));
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    for (o, x) in self.grad_buf(grads, v).iter_mut().zip(gd) {
                        *o += x;
                    }
                }
            }
            Op::AddRow { a, bias } => {
                for (o, x) in self.grad_buf(grads, *a).iter_mut().zip(gd) {
                    *o += x;
                }
                let cols = self.value(*bias).len();
                let gb = self.grad_buf(grads, *bias);
                for row in gd.chunks(cols) {
                    for (o, x) in gb.iter_mut().zip(row) {
                        *o += x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for (i, o) in self.grad_buf(grads, *a).iter_mut().enumerate() {
                    *o += gd[i] * bv[i];
                }
                for (i, o) in self.grad_buf(grads, *b).iter_mut().enumerate() {
                    *o += gd[i] * av[i];
                }
            }
            Op::Scale { a, s } => {
                for (o, x) in self.grad_buf(grads, *a).iter_mut().zip(gd) {
                    *o += s * x;
                }
            }
            Op::Gelu { a, kind } => {
                let x = self.value(*a).data();
                for (i, o) in self.grad_buf(grads, *a).iter_mut().enumerate() {
                    *o += gd[i] * gelu_grad(x[i], *kind);
                }
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                for (i, o) in self.grad_buf(grads, *a).iter_mut().enumerate() {
                    *o += gd[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Softmax { a } => {
                let (_, cols) = node.value.rows_cols();
                let y = node.value.data();
                let ga = self.grad_buf(grads, *a);
                for ((yr, gr), or) in y.chunks(cols).zip(gd.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, yy), gg) in or.iter_mut().zip(yr).zip(gr) {
                        *o += yy * (gg - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (_, cols) = xhat.rows_cols();
                let gam = self.value(*gamma).data();
                let xh = xhat.data();
                {
                    let gg = self.grad_buf(grads, *gamma);
                    for (xr, gr) in xh.chunks(cols).zip(gd.chunks(cols)) {
                        for ((o, a), b) in gg.iter_mut().zip(xr).zip(gr) {
                            *o += a * b;
                        }
                    }
                }
                {
                    let gb = self.grad_buf(grads, *beta);
                    for gr in gd.chunks(cols) {
                        for (o, b) in gb.iter_mut().zip(gr) {
                            *o += b;
                        }
                    }
                }
                let gx = self.grad_buf(grads, *x);
                let n = cols as f64;
                let mut dxhat = vec![0.0; cols];
                for (r, ((xr, gr), or)) in xh.chunks(cols).zip(gd.chunks(cols)).zip(gx.chunks_mut(cols)).enumerate() {
                    for ((d, g), gm) in dxhat.iter_mut().zip(gr).zip(gam) {
                        *d = g * gm;
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xr).map(|(d, x)| d * x).sum();
                    let s = inv_std[r] / n;
                    for ((o, d), xv) in or.iter_mut().zip(&dxhat).zip(xr) {
                        *o += s * (n * d - sum_d - xv * sum_dx);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                for (i, o) in self.grad_buf(grads, *a).iter_mut().enumerate() {
                    *o += gd[i] * mask[i];
                }
            }
            Op::Embedding { table, ids } => {
                let cols = node.value.shape()[1];
                let gt = self.grad_buf(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, x) in gt[id * cols..(id + 1) * cols].iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                        *o += x;
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                let cols = node.value.shape()[1];
                let ga = self.grad_buf(grads, *a);
                for (r, &src) in rows.iter().enumerate() {
                    for (o, x) in ga[src * cols..(src + 1) * cols].iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                        *o += x;
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs, drop } => self.attention_backward(*q, *k, *v, layout, probs, drop.as_deref(), gd, grads),
            Op::SoftCrossEntropy { logits, targets, probs } => {
                let (rows, cols) = probs.rows_cols();
                let scale = gd[0] / rows.max(1) as f64;
                let gl = self.grad_buf(grads, *logits);
                for r in 0..rows {
                    let t = &targets.data()[r * cols..(r + 1) * cols];
                    let st: f64 = t.iter().sum();
                    for c in 0..cols {
                        gl[r * cols + c] += scale * (probs.data()[r * cols + c] * st - t[c]);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (rows, cols) = probs.rows_cols();
                let scale = gd[0] / rows.max(1) as f64;
                let gl = self.grad_buf(grads, *logits);
                for (r, &l) in labels.iter().enumerate() {
                    for c in 0..cols {
                        gl[r * cols + c] += scale * probs.data()[r * cols + c];
                    }
                    gl[r * cols + l] -= scale;
                }
            }
            Op::Sum { a } => {
                for o in self.grad_buf(grads, *a).iter_mut() {
                    *o += gd[0];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        drop: Option<&[f64]>,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (rows, d) = dims2(self.value(q), "");
        let (batch, seq, heads) = (layout.batch, layout.seq, layout.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tt = seq * seq;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * tt;
                let p = &probs[base..base + tt];
                let dm = drop.map(|m| &m[base..base + tt]);
                for i in 0..seq {
                    let go = &gd[(b * seq + i) * d + h * dh..][..dh];
                    // dV and dP (through the dropout mask).
                    for j in 0..seq {
                        let pij = p[i * seq + j];
                        if pij == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let m = dm.map_or(1.0, |m| m[i * seq + j]);
                        let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                        dp[j] = m * go.iter().zip(vj).map(|(x, y)| x * y).sum::<f64>();
                        if m != 0.0 {
                            let w = pij * m;
                            for (o, x) in gv[(b * seq + j) * d + h * dh..][..dh].iter_mut().zip(go) {
                                *o += w * x;
                            }
                        }
                    }
                    let dot: f64 = (0..seq).map(|j| p[i * seq + j] * dp[j]).sum();
                    let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..seq {
                        let pij = p[i * seq + j];
                        if pij == 0.0 {
                            continue;
                        }
                        let ds = pij * (dp[j] - dot) * scale;
                        let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                        for (o, x) in gq[(b * seq + i) * d + h * dh..][..dh].iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        for (o, x) in gk[(b * seq + j) * d + h * dh..][..dh].iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            for (o, x) in self.grad_buf(grads, var).iter_mut().zip(&g) {
                *o += x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_many, Tensor};
    use crate::rng::{self, Domain};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, Domain::Init, 99);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect())
    }

    /// Contracts an op's output with a fixed random tensor so every output
    /// coordinate carries a distinct weight.
    fn weighted(t: &mut Tape, out: Var, seed: u64) -> Var {
        let w = random(t.value(out).shape(), seed);
        let w = t.leaf(w);
        let p = t.mul(out, w);
        t.sum(p)
    }

    fn check<F>(points: &[Tensor], build: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var + Sync,
    {
        let report = grad_check_many(|t, xs| build(t, xs), points, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "max rel error {} at {:?}", report.max_rel_error, report.worst);
        report.max_rel_error
    }

    #[test]
    fn matmul_and_transpose() {
        check(&[random(&[3, 4], 1), random(&[4, 5], 2)], |t, x| {
            let y = t.matmul(x[0], x[1]);
            weighted(t, y, 3)
        });
        check(&[random(&[3, 4], 4), random(&[5, 4], 5)], |t, x| {
            let y = t.matmul_nt(x[0], x[1]);
            weighted(t, y, 6)
        });
    }

    #[test]
    fn elementwise_ops() {
        check(&[random(&[2, 3], 7), random(&[3], 8), random(&[2, 3], 9)], |t, x| {
            let a = t.add_row(x[0], x[1]);
            let b = t.mul(a, x[2]);
            let c = t.add(b, x[0]);
            let d = t.scale(c, 1.7);
            let e = t.gelu(d, GeluKind::Tanh);
            let f = t.gelu(e, GeluKind::Erf);
            let g = t.tanh(f);
            weighted(t, g, 10)
        });
    }

    #[test]
    fn softmax_and_layer_norm() {
        check(&[random(&[3, 5], 11)], |t, x| {
            let y = t.softmax(x[0]);
            weighted(t, y, 12)
        });
        check(&[random(&[4, 6], 13), random(&[6], 14), random(&[6], 15)], |t, x| {
            let y = t.layer_norm(x[0], x[1], x[2], 1e-12);
            weighted(t, y, 16)
        });
    }

    #[test]
    fn lookups() {
        check(&[random(&[5, 3], 17)], |t, x| {
            let e = t.embedding(x[0], &[4, 0, 4, 2]);
            let g = t.gather_rows(e, &[3, 0, 0]);
            weighted(t, g, 18)
        });
    }

    #[test]
    fn losses() {
        let targets = Tensor::new([2, 3], vec![0.8, 0.1, 0.1, 0.0, 0.0, 1.0]);
        check(&[random(&[2, 3], 19)], |t, x| t.soft_cross_entropy(x[0], &targets));
        check(&[random(&[3, 4], 20)], |t, x| t.cross_entropy(x[0], &[3, 0, 1]));
        // Soft targets that are one-hot agree with the hard-label loss.
        let mut tape = Tape::new();
        let z = tape.leaf(random(&[2, 3], 21));
        let soft = tape.soft_cross_entropy(z, &Tensor::new([2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let hard = tape.cross_entropy(z, &[1, 2]);
        assert!((tape.value(soft).item() - tape.value(hard).item()).abs() < 1e-15);
    }

    #[test]
    fn five_logit_cross_entropy() {
        let target = Tensor::new([1, 5], vec![0.8, 0.05, 0.05, 0.05, 0.05]);
        let err = check(&[random(&[1, 5], 22)], |t, x| t.soft_cross_entropy(x[0], &target));
        assert!(err < 1e-7);
    }

    #[test]
    fn attention_with_padding() {
        let layout = AttentionLayout {
            batch: 2,
            seq: 3,
            heads: 2,
            key_valid: vec![true, true, false, true, true, true],
        };
        let pts = [random(&[6, 4], 23), random(&[6, 4], 24), random(&[6, 4], 25)];
        check(&pts, |t, x| {
            let mut r = rng::stream(0, Domain::Dropout, 0);
            let y = t.attention(x[0], x[1], x[2], layout.clone(), 0.0, &mut r, false);
            weighted(t, y, 26)
        });
    }

    #[test]
    fn attention_with_dropout_mask() {
        let layout = AttentionLayout {
            batch: 1,
            seq: 4,
            heads: 1,
            key_valid: vec![true; 4],
        };
        let pts = [random(&[4, 2], 27), random(&[4, 2], 28), random(&[4, 2], 29)];
        // Same rng stream each evaluation, so the mask is fixed.
        check(&pts, |t, x| {
            let mut r = rng::stream(1, Domain::Dropout, 0);
            let y = t.attention(x[0], x[1], x[2], layout.clone(), 0.3, &mut r, true);
            weighted(t, y, 30)
        });
    }

    #[test]
    fn padded_keys_get_no_weight() {
        let mut tape = Tape::new();
        let layout = AttentionLayout {
            batch: 1,
            seq: 3,
            heads: 1,
            key_valid: vec![true, true, false],
        };
        let q = tape.leaf(random(&[3, 2], 31));
        let k = tape.leaf(random(&[3, 2], 32));
        let mut v1 = random(&[3, 2], 33);
        let v = tape.leaf(v1.clone());
        let mut r = rng::stream(0, Domain::Dropout, 0);
        let out1 = tape.attention(q, k, v, layout.clone(), 0.0, &mut r, false);
        v1.data_mut()[4] = 100.0;
        v1.data_mut()[5] = -100.0;
        let v2 = tape.leaf(v1);
        let out2 = tape.attention(q, k, v2, layout, 0.0, &mut r, false);
        assert_eq!(tape.value(out1), tape.value(out2));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[3, 3], 34));
        let mut r = rng::stream(0, Domain::Dropout, 0);
        let y = tape.dropout(x, 0.1, &mut r, false);
        assert_eq!(x, y);
        let z = tape.dropout(x, 0.5, &mut r, true);
        let kept = tape.value(z).data().iter().zip(tape.value(x).data()).all(|(a, b)| *a == 0.0 || (a - 2.0 * b).abs() < 1e-15);
        assert!(kept);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln3() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new([1, 3], vec![0.0; 3]));
        let l = tape.soft_cross_entropy(z, &Tensor::new([1, 3], vec![0.8, 0.1, 0.1]));
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "[2, 3]")]
    fn shape_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros([2, 3]));
        let b = tape.leaf(Tensor::zeros([2, 3]));
        tape.matmul(a, b);
    }
}
