//! Tape-based reverse-mode automatic differentiation over row-major matrices.
//!
//! Operations are coarse (a whole linear layer, layer norm, or causal
//! attention block is one node), which keeps the tape short and lets every
//! node use blocked matrix kernels. A forward pass records nodes in order;
//! [`Tape::backward`] walks them in reverse, accumulating gradients into
//! parents. Parameter leaves borrow their values, so building a tape costs no
//! parameter copies.

use std::borrow::Cow;

use super::tensor::{gemm, MatMut, MatRef, Real};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op<T> {
    Leaf,
    Embed { table: Var, ids: Vec<u32> },
    Linear { x: Var, w: Var, b: Option<Var> },
    /// `x * w^T` with `w` stored as `out x in`.
    LinearT { x: Var, w: Var },
    Add(Var, Var),
    LayerNorm { x: Var, g: Var, b: Var, mean: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Relu(Var),
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<u32>, weights: Vec<T>, probs: Vec<T>, total_weight: T },
    BceWithLogits { logits: Var, targets: Vec<T> },
}

struct Node<'p, T: Real> {
    value: Cow<'p, [T]>,
    rows: usize,
    cols: usize,
    op: Op<T>,
}

pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Cow<'p, [T]>, rows: usize, cols: usize, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf borrowing `data` (typically a parameter).
    pub fn leaf(&mut self, data: &'p [T], rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf shape");
        self.push(Cow::Borrowed(data), rows, cols, Op::Leaf)
    }

    /// A leaf owning its data (inputs, constants).
    pub fn constant(&mut self, data: Vec<T>, rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols, "constant shape");
        self.push(Cow::Owned(data), rows, cols, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gathers rows of `table` by id.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let (rows, d) = self.shape(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            assert!(id < rows, "embedding id {id} out of range {rows}");
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        self.push(Cow::Owned(out), ids.len(), d, Op::Embed { table, ids: ids.to_vec() })
    }

    /// `x * w + b` with `w` stored `in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, k) = self.shape(x);
        let (k2, m) = self.shape(w);
        assert_eq!(k, k2, "linear inner dim");
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), m, "bias width");
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            MatRef::dense(self.value(x), n, k),
            MatRef::dense(self.value(w), k, m),
            beta,
            MatMut::dense(&mut out, n, m),
        );
        self.push(Cow::Owned(out), n, m, Op::Linear { x, w, b })
    }

    /// `x * w^T` with `w` stored `out x in` (tied unembedding).
    pub fn linear_t(&mut self, x: Var, w: Var) -> Var {
        let (n, k) = self.shape(x);
        let (m, k2) = self.shape(w);
        assert_eq!(k, k2, "linear_t inner dim");
        let mut out = vec![T::zero(); n * m];
        gemm(
            MatRef::dense(self.value(x), n, k),
            MatRef::dense(self.value(w), m, k).t(),
            T::zero(),
            MatMut::dense(&mut out, n, m),
        );
        self.push(Cow::Owned(out), n, m, Op::LinearT { x, w })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let (r, c) = self.shape(a);
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        self.push(Cow::Owned(out), r, c, Op::Add(a, b))
    }

    /// Row-wise layer normalization with gain `g` and bias `b` (both `1 x d`).
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (n, d) = self.shape(x);
        let (xv, gv, bv) = (self.value(x), self.value(g), self.value(b));
        assert_eq!(gv.len(), d);
        let eps = T::from_f64(LN_EPS);
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut out = vec![T::zero(); n * d];
        let mut mean = Vec::with_capacity(n);
        let mut rstd = Vec::with_capacity(n);
        for (row, o) in xv.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let (mu, rs) = layer_norm_row(row, gv, bv, o, inv_d, eps);
            mean.push(mu);
            rstd.push(rs);
        }
        self.push(Cow::Owned(out), n, d, Op::LayerNorm { x, g, b, mean, rstd })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out: Vec<T> = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(Cow::Owned(out), r, c, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out: Vec<T> = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(Cow::Owned(out), r, c, Op::Relu(x))
    }

    /// Causal multi-head self-attention. `qkv` is `(batch*seq) x 3d` with the
    /// query, key, and value blocks side by side; output is `(batch*seq) x d`.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let (n, three_d) = self.shape(qkv);
        assert_eq!(n, batch * seq, "attention rows");
        let d = three_d / 3;
        assert_eq!(d % heads, 0, "heads must divide width");
        let mut out = vec![T::zero(); n * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        attention_forward(self.value(qkv), &mut out, &mut probs, batch, seq, heads, d);
        self.push(Cow::Owned(out), n, d, Op::Attention { qkv, batch, seq, heads, probs })
    }

    /// Weighted mean token cross-entropy. Rows with weight 0 are excluded
    /// from the loss entirely. Returns a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[T]) -> Var {
        let (n, v) = self.shape(logits);
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        let mut total_weight = T::zero();
        for i in 0..n {
            let w = weights[i];
            if w == T::zero() {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            let pr = &mut probs[i * v..(i + 1) * v];
            let logz = softmax_into(row, pr);
            let t = targets[i] as usize;
            assert!(t < v, "target {t} out of vocab {v}");
            total += w * (logz - row[t]);
            total_weight += w;
        }
        let loss = if total_weight > T::zero() { total / total_weight } else { T::zero() };
        self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs, total_weight },
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Var {
        let (n, c) = self.shape(logits);
        assert_eq!(c, 1);
        assert_eq!(targets.len(), n);
        let lv = self.value(logits);
        let mut total = T::zero();
        for (&z, &y) in lv.iter().zip(targets) {
            // log(1 + e^z) - y z, computed stably
            let softplus = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
            total += softplus - y * z;
        }
        let loss = if n > 0 { total / T::from_f64(n as f64) } else { T::zero() };
        self.push(Cow::Owned(vec![loss]), 1, 1, Op::BceWithLogits { logits, targets: targets.to_vec() })
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<T> {
        let len = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    /// Back-propagates from the scalar node `root`.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        // Temporarily take the op out so parent gradient buffers can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Embed { table, ids } => {
                let d = cols;
                let gt = self.grad_buf(*table);
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, k) = self.shape(*x);
                let m = cols;
                let mut gx = std::mem::take(self.grad_buf(*x));
                gemm(
                    MatRef::dense(g, n, m),
                    MatRef::dense(&self.nodes[w.0].value, k, m).t(),
                    T::one(),
                    MatMut::dense(&mut gx, n, k),
                );
                self.grads[x.0] = Some(gx);
                let mut gw = std::mem::take(self.grad_buf(*w));
                gemm(
                    MatRef::dense(&self.nodes[x.0].value, n, k).t(),
                    MatRef::dense(g, n, m),
                    T::one(),
                    MatMut::dense(&mut gw, k, m),
                );
                self.grads[w.0] = Some(gw);
                if let Some(b) = b {
                    let gb = self.grad_buf(*b);
                    for row in g.chunks_exact(m) {
                        add_into(gb, row);
                    }
                }
            }
            Op::LinearT { x, w } => {
                let (n, k) = self.shape(*x);
                let m = cols;
                let mut gx = std::mem::take(self.grad_buf(*x));
                gemm(
                    MatRef::dense(g, n, m),
                    MatRef::dense(&self.nodes[w.0].value, m, k),
                    T::one(),
                    MatMut::dense(&mut gx, n, k),
                );
                self.grads[x.0] = Some(gx);
                let mut gw = std::mem::take(self.grad_buf(*w));
                gemm(
                    MatRef::dense(g, n, m).t(),
                    MatRef::dense(&self.nodes[x.0].value, n, k),
                    T::one(),
                    MatMut::dense(&mut gw, m, k),
                );
                self.grads[w.0] = Some(gw);
            }
            Op::Add(a, b) => {
                add_into(self.grad_buf(*a), g);
                add_into(self.grad_buf(*b), g);
            }
            Op::LayerNorm { x, g: gain, b, mean, rstd } => {
                let d = cols;
                let inv_d = T::one() / T::from_f64(d as f64);
                let mut gx = std::mem::take(self.grad_buf(*x));
                let mut gg = std::mem::take(self.grad_buf(*gain));
                let mut gb = std::mem::take(self.grad_buf(*b));
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dx = T::zero();
                    let mut sum_dx_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (xr[j] - mu) * rs;
                        dxhat[j] = gr[j] * gv[j];
                        sum_dx += dxhat[j];
                        sum_dx_xhat += dxhat[j] * xhat[j];
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                    }
                    let (m1, m2) = (sum_dx * inv_d, sum_dx_xhat * inv_d);
                    let gxr = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        gxr[j] += rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.grads[x.0] = Some(gx);
                self.grads[gain.0] = Some(gg);
                self.grads[b.0] = Some(gb);
            }
            Op::Gelu(x) => {
                let mut gx = std::mem::take(self.grad_buf(*x));
                for ((o, &xv), &gi) in gx.iter_mut().zip(self.nodes[x.0].value.iter()).zip(g) {
                    *o += gi * gelu_grad(xv);
                }
                self.grads[x.0] = Some(gx);
            }
            Op::Relu(x) => {
                let mut gx = std::mem::take(self.grad_buf(*x));
                for ((o, &xv), &gi) in gx.iter_mut().zip(self.nodes[x.0].value.iter()).zip(g) {
                    if xv > T::zero() {
                        *o += gi;
                    }
                }
                self.grads[x.0] = Some(gx);
            }
            Op::Attention { qkv, batch, seq, heads, probs } => {
                let mut gq = std::mem::take(self.grad_buf(*qkv));
                attention_backward(
                    &self.nodes[qkv.0].value,
                    probs,
                    g,
                    &mut gq,
                    *batch,
                    *seq,
                    *heads,
                    cols,
                );
                self.grads[qkv.0] = Some(gq);
            }
            Op::CrossEntropy { logits, targets, weights, probs, total_weight } => {
                let v = self.shape(*logits).1;
                if *total_weight > T::zero() {
                    let scale = g[0] / *total_weight;
                    let gl = self.grad_buf(*logits);
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        let pr = &probs[r * v..(r + 1) * v];
                        let s = scale * w;
                        for j in 0..v {
                            row[j] += s * pr[j];
                        }
                        row[t as usize] -= s;
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let n = targets.len();
                let scale = g[0] / T::from_f64(n.max(1) as f64);
                let mut gl = std::mem::take(self.grad_buf(*logits));
                for ((o, &z), &y) in gl.iter_mut().zip(self.nodes[logits.0].value.iter()).zip(targets) {
                    *o += scale * (sigmoid(z) - y);
                }
                self.grads[logits.0] = Some(gl);
            }
        }
        self.nodes[i].op = op;
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Normalizes one row into `out`; returns `(mean, 1/std)`.
pub fn layer_norm_row<T: Real>(row: &[T], g: &[T], b: &[T], out: &mut [T], inv_d: T, eps: T) -> (T, T) {
    let mu = row.iter().copied().sum::<T>() * inv_d;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
    let rs = T::one() / (var + eps).sqrt();
    for j in 0..row.len() {
        out[j] = (row[j] - mu) * rs * g[j] + b[j];
    }
    (mu, rs)
}

pub fn layer_norm_eps<T: Real>() -> T {
    T::from_f64(LN_EPS)
}

/// Writes `softmax(row)` into `out` and returns `logsumexp(row)`.
pub fn softmax_into<T: Real>(row: &[T], out: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    max + sum.ln()
}

#[allow(clippy::too_many_arguments)]
fn attention_forward<T: Real>(
    qkv: &[T],
    out: &mut [T],
    probs: &mut [T],
    batch: usize,
    seq: usize,
    heads: usize,
    d: usize,
) {
    let dh = d / heads;
    let ld = 3 * d;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut scores = vec![T::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let row0 = b * seq;
            let q = MatRef::block(qkv, ld, row0, h * dh, seq, dh);
            let k = MatRef::block(qkv, ld, row0, d + h * dh, seq, dh);
            let v = MatRef::block(qkv, ld, row0, 2 * d + h * dh, seq, dh);
            gemm(q, k.t(), T::zero(), MatMut::dense(&mut scores, seq, seq));
            let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
            for i in 0..seq {
                let srow = &mut scores[i * seq..i * seq + i + 1];
                for s in srow.iter_mut() {
                    *s *= scale;
                }
                softmax_into(srow, &mut p[i * seq..i * seq + i + 1]);
            }
            gemm(
                MatRef::dense(p, seq, seq),
                v,
                T::zero(),
                MatMut::block(out, d, row0, h * dh, seq, dh),
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    qkv: &[T],
    probs: &[T],
    gout: &[T],
    gqkv: &mut [T],
    batch: usize,
    seq: usize,
    heads: usize,
    d: usize,
) {
    let dh = d / heads;
    let ld = 3 * d;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut dp = vec![T::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let row0 = b * seq;
            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
            let go = MatRef::block(gout, d, row0, h * dh, seq, dh);
            let v = MatRef::block(qkv, ld, row0, 2 * d + h * dh, seq, dh);
            // dV += P^T dO
            gemm(
                MatRef::dense(p, seq, seq).t(),
                go,
                T::one(),
                MatMut::block(gqkv, ld, row0, 2 * d + h * dh, seq, dh),
            );
            // dP = dO V^T, then dS = P * (dP - rowsum(dP * P)) * scale
            gemm(go, v.t(), T::zero(), MatMut::dense(&mut dp, seq, seq));
            for i in 0..seq {
                let pr = &p[i * seq..i * seq + i + 1];
                let dr = &mut dp[i * seq..(i + 1) * seq];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
                for x in dr[i + 1..].iter_mut() {
                    *x = T::zero();
                }
            }
            let q = MatRef::block(qkv, ld, row0, h * dh, seq, dh);
            let k = MatRef::block(qkv, ld, row0, d + h * dh, seq, dh);
            // dQ += dS K ; dK += dS^T Q
            gemm(
                MatRef::dense(&dp, seq, seq),
                k,
                T::one(),
                MatMut::block(gqkv, ld, row0, h * dh, seq, dh),
            );
            gemm(
                MatRef::dense(&dp, seq, seq).t(),
                q,
                T::one(),
                MatMut::block(gqkv, ld, row0, d + h * dh, seq, dh),
            );
        }
    }
}
