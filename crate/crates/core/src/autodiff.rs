//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and whatever it needs for the backward pass,
//! so node order is a topological order and [`Graph::backward`] is a single
//! reverse sweep. Leaves either wrap constants or parameters (copied in via
//! [`Graph::param`]); parameter gradients accumulate on the leaf until they are
//! read back with [`Graph::param_grads`].
//!
//! Nodes whose inputs need no gradient are marked as such and skipped during
//! the sweep, which keeps frozen-backbone training cheap.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Sum { a: Var },
    MeanAxis { a: Var, outer: usize, len: usize, inner: usize },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Activate { a: Var, kind: Activation },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SelectRows { a: Var, rows: Vec<usize> },
    SegmentMean { a: Var, segments: Vec<Vec<usize>> },
    Interleave { a: Var, b: Var, batch: usize, a_rows: usize, b_rows: usize },
    Blocks { a: Var, batch: usize, block: usize, start: usize, len: usize },
    Reshape { a: Var },
    Attention(Box<AttentionCache>),
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only populated on leaves.
    grad: Option<Vec<f64>>,
}

/// Recording tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<TensorId, Var>,
}

// c = beta * c + op(a) . op(b) with a logically [m x k], b logically [k x n],
// all contiguous. `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// `0.5 * (1 + tanh(u))` written as the logistic `1 / (1 + exp(-2u))`.
fn gelu_gate(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// A leaf tracking gradient regardless of the tensor's own flag.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    /// Binds a parameter tensor. Binding the same tensor twice returns the
    /// same node. Gradient is tracked iff `t.requires_grad()`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let rg = t.requires_grad();
        let v = self.push(t.clone(), Op::Leaf, rg);
        self.params.insert(t.id(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient accumulated for the parameter bound from `t`.
    pub fn param_grad(&self, t: &Tensor) -> Option<&[f64]> {
        self.params.get(&t.id()).and_then(|&v| self.grad(v))
    }

    /// Adds this graph's gradient for `t` (if any) into `t.grad`.
    pub fn param_grads(&self, t: &mut Tensor) {
        if let Some(g) = self.params.get(&t.id()).and_then(|&v| self.nodes[v.0].grad.as_ref()) {
            t.accumulate_grad(g);
        }
    }

    fn expect_rank(&self, v: Var, rank: usize, op: &'static str) -> Result<()> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::Shape { op, lhs: s.to_vec(), rhs: vec![rank] });
        }
        Ok(())
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.expect_rank(v, 2, op)?;
        let s = self.shape(v);
        Ok((s[0], s[1]))
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.mat_dims(a, "matmul")?;
        let (k2, c) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape { op: "matmul", lhs: vec![r, k], rhs: vec![k2, c] });
        }
        let mut out = vec![0.0; r * c];
        gemm(r, k, c, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::MatMul { a, b }, rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(sa.to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(a, "add_row")?;
        if self.shape(bias) != [c] {
            return Err(Error::Shape { op: "add_row", lhs: vec![r, c], rhs: self.shape(bias).to_vec() });
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            add_into(row, b);
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::AddRow { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x * factor).collect());
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, factor }, rg)
    }

    /// Sum of all elements, as a shape-`[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Mean over one axis; the axis is removed (a rank-1 input yields `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape { op: "mean_axis", lhs: shape, rhs: vec![axis] });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let src = &x[(o * len + i) * inner..(o * len + i + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut new_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &s)| s).collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::MeanAxis { a, outer, len, inner }, rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape { op: "softmax", lhs: shape, rhs: vec![axis] });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..len {
                    let e = (x[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    out[idx(i)] /= z;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { a, outer, len, inner }, rg))
    }

    /// Row-wise layer normalization of an `n x d` matrix with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.mat_dims(a, "layer_norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Shape { op: "layer_norm", lhs: vec![n, d], rhs: self.shape(p).to_vec() });
            }
        }
        let x = self.value(a).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::LayerNorm { a, gamma, beta, xhat, rstd }, rg))
    }

    pub fn activate(&mut self, a: Var, kind: Activation) -> Var {
        let v = self.value(a);
        let f = match kind {
            Activation::Gelu => gelu,
            Activation::Relu => |x: f64| x.max(0.0),
        };
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(t, Op::Activate { a, kind }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Relu)
    }

    /// Mean over rows of `-log softmax(logits[b])[labels[b]]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.mat_dims(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Shape { op: "cross_entropy", lhs: vec![b, c], rhs: vec![labels.len()] });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss / b as f64), op, rg))
    }

    /// Gathers rows of a matrix (repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.mat_dims(a, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Shape { op: "select_rows", lhs: vec![r, c], rhs: vec![bad] });
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![rows.len(), c], out), Op::SelectRows { a, rows: rows.to_vec() }, rg))
    }

    /// `out[s] = mean(a[i] for i in segments[s])`. Every segment must be non-empty.
    pub fn segment_mean(&mut self, a: Var, segments: Vec<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.mat_dims(a, "segment_mean")?;
        if let Some(s) = segments.iter().position(Vec::is_empty) {
            return Err(Error::EmptyPool(s));
        }
        if segments.iter().flatten().any(|&i| i >= r) {
            return Err(Error::Shape { op: "segment_mean", lhs: vec![r, c], rhs: vec![segments.len()] });
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            let dst = &mut out[s * c..(s + 1) * c];
            for &i in seg {
                add_into(dst, &x[i * c..(i + 1) * c]);
            }
            let inv = 1.0 / seg.len() as f64;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![segments.len(), c], out), Op::SegmentMean { a, segments }, rg))
    }

    /// Per batch element, stacks `a`'s block of rows above `b`'s block.
    pub fn interleave(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (ra, ca) = self.mat_dims(a, "interleave")?;
        let (rb, cb) = self.mat_dims(b, "interleave")?;
        if ca != cb || ra % batch != 0 || rb % batch != 0 {
            return Err(Error::Shape { op: "interleave", lhs: vec![ra, ca], rhs: vec![rb, cb] });
        }
        let (a_rows, b_rows) = (ra / batch, rb / batch);
        let c = ca;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity((ra + rb) * c);
        for i in 0..batch {
            out.extend_from_slice(&xa[i * a_rows * c..(i + 1) * a_rows * c]);
            out.extend_from_slice(&xb[i * b_rows * c..(i + 1) * b_rows * c]);
        }
        let rg = self.rg(a) || self.rg(b);
        let op = Op::Interleave { a, b, batch, a_rows, b_rows };
        Ok(self.push(Tensor::from_parts(vec![ra + rb, c], out), op, rg))
    }

    /// Per batch element, keeps rows `start..start + len` of each block.
    pub fn blocks(&mut self, a: Var, batch: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat_dims(a, "blocks")?;
        if r % batch != 0 || start + len > r / batch {
            return Err(Error::Shape { op: "blocks", lhs: vec![r, c], rhs: vec![batch, start, len] });
        }
        let block = r / batch;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(batch * len * c);
        for i in 0..batch {
            let base = (i * block + start) * c;
            out.extend_from_slice(&x[base..base + len * c]);
        }
        let rg = self.rg(a);
        let op = Op::Blocks { a, batch, block, start, len };
        Ok(self.push(Tensor::from_parts(vec![batch * len, c], out), op, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `(batch * seq) x d` with each example's rows
    /// contiguous. Keys with `key_mask == false` receive exactly zero weight;
    /// a query with no attendable key outputs zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize, key_mask: &[bool]) -> Result<Var> {
        let (n, d) = self.mat_dims(q, "attention")?;
        for other in [k, v] {
            if self.shape(other) != [n, d] {
                return Err(Error::Shape { op: "attention", lhs: vec![n, d], rhs: self.shape(other).to_vec() });
            }
        }
        if heads == 0 || d % heads != 0 || batch == 0 || n % batch != 0 || key_mask.len() != n {
            return Err(Error::Shape { op: "attention", lhs: vec![n, d], rhs: vec![batch, heads, key_mask.len()] });
        }
        let seq = n / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; n * d];
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // SAFETY: every strided view below stays inside the n x d buffers
                // (rows b*seq..(b+1)*seq, columns h*dh..(h+1)*dh) or the seq x seq block.
                unsafe {
                    matrixmultiply::dgemm(
                        seq,
                        dh,
                        seq,
                        scale,
                        qd.as_ptr().add(off),
                        d as isize,
                        1,
                        kd.as_ptr().add(off),
                        1,
                        d as isize,
                        0.0,
                        p.as_mut_ptr(),
                        seq as isize,
                        1,
                    );
                }
                for row in p.chunks_mut(seq) {
                    let max =
                        row.iter().zip(mask).filter(|(_, &m)| m).map(|(&s, _)| s).fold(f64::NEG_INFINITY, f64::max);
                    if max == f64::NEG_INFINITY {
                        row.iter_mut().for_each(|s| *s = 0.0);
                        continue;
                    }
                    let mut z = 0.0;
                    for (s, &m) in row.iter_mut().zip(mask) {
                        *s = if m { (*s - max).exp() } else { 0.0 };
                        z += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= z);
                }
                unsafe {
                    matrixmultiply::dgemm(
                        seq,
                        seq,
                        dh,
                        1.0,
                        p.as_ptr(),
                        seq as isize,
                        1,
                        vd.as_ptr().add(off),
                        d as isize,
                        1,
                        0.0,
                        out.as_mut_ptr().add(off),
                        d as isize,
                        1,
                    );
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let cache = AttentionCache { q, k, v, batch, seq, heads, probs };
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::Attention(Box::new(cache)), rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let rg = |v: Var| nodes[v.0].requires_grad;
        // Gradient slot for `v`, zero-initialized on first touch.
        fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    gemm(r, c, k, g, false, val(*b), true, 1.0, slot(adj, nodes, *a));
                }
                if rg(*b) {
                    gemm(k, r, c, val(*a), true, g, false, 1.0, slot(adj, nodes, *b));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if rg(v) {
                        add_into(slot(adj, nodes, v), g);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if rg(*a) {
                    add_into(slot(adj, nodes, *a), g);
                }
                if rg(*bias) {
                    let c = nodes[bias.0].value.numel();
                    let db = slot(adj, nodes, *bias);
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let other = val(*b);
                    let da = slot(adj, nodes, *a);
                    da.iter_mut().zip(g).zip(other).for_each(|((d, gi), o)| *d += gi * o);
                }
                if rg(*b) {
                    let other = val(*a);
                    let db = slot(adj, nodes, *b);
                    db.iter_mut().zip(g).zip(other).for_each(|((d, gi), o)| *d += gi * o);
                }
            }
            Op::Scale { a, factor } => {
                let da = slot(adj, nodes, *a);
                da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * factor);
            }
            Op::Sum { a } => {
                let da = slot(adj, nodes, *a);
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::MeanAxis { a, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let da = slot(adj, nodes, *a);
                let inv = 1.0 / len as f64;
                for o in 0..outer {
                    for l in 0..len {
                        for j in 0..inner {
                            da[(o * len + l) * inner + j] += g[o * inner + j] * inv;
                        }
                    }
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let y = out.data();
                let da = slot(adj, nodes, *a);
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + j;
                        let dot: f64 = (0..len).map(|l| y[idx(l)] * g[idx(l)]).sum();
                        for l in 0..len {
                            da[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, xhat, rstd } => {
                let d = nodes[gamma.0].value.numel();
                let n = rstd.len();
                if rg(*gamma) {
                    let dg = slot(adj, nodes, *gamma);
                    for r in 0..n {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if rg(*beta) {
                    let db = slot(adj, nodes, *beta);
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                }
                if rg(*a) {
                    let gam = val(*gamma);
                    let da = slot(adj, nodes, *a);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gam[c];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            da[r * d + c] += rstd[r] * (dxhat[c] - m1 - xh[c] * m2);
                        }
                    }
                }
            }
            Op::Activate { a, kind } => {
                let x = val(*a);
                let da = slot(adj, nodes, *a);
                match kind {
                    Activation::Gelu => da.iter_mut().zip(g).zip(x).for_each(|((d, gi), &xi)| *d += gi * gelu_grad(xi)),
                    Activation::Relu => {
                        da.iter_mut().zip(g).zip(x).for_each(|((d, gi), &xi)| *d += if xi > 0.0 { *gi } else { 0.0 })
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let dl = slot(adj, nodes, *logits);
                for r in 0..b {
                    for j in 0..c {
                        let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                        dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::SelectRows { a, rows } => {
                let c = out.shape()[1];
                let da = slot(adj, nodes, *a);
                for (o, &src) in rows.iter().enumerate() {
                    add_into(&mut da[src * c..(src + 1) * c], &g[o * c..(o + 1) * c]);
                }
            }
            Op::SegmentMean { a, segments } => {
                let c = out.shape()[1];
                let da = slot(adj, nodes, *a);
                for (s, seg) in segments.iter().enumerate() {
                    let inv = 1.0 / seg.len() as f64;
                    for &r in seg {
                        for j in 0..c {
                            da[r * c + j] += g[s * c + j] * inv;
                        }
                    }
                }
            }
            Op::Interleave { a, b, batch, a_rows, b_rows } => {
                let c = out.shape()[1];
                let (ab, bb) = (a_rows * c, b_rows * c);
                if rg(*a) {
                    let da = slot(adj, nodes, *a);
                    for i in 0..*batch {
                        add_into(&mut da[i * ab..(i + 1) * ab], &g[i * (ab + bb)..i * (ab + bb) + ab]);
                    }
                }
                if rg(*b) {
                    let db = slot(adj, nodes, *b);
                    for i in 0..*batch {
                        add_into(&mut db[i * bb..(i + 1) * bb], &g[i * (ab + bb) + ab..(i + 1) * (ab + bb)]);
                    }
                }
            }
            Op::Blocks { a, batch, block, start, len } => {
                let c = out.shape()[1];
                let da = slot(adj, nodes, *a);
                for i in 0..*batch {
                    let base = (i * block + start) * c;
                    add_into(&mut da[base..base + len * c], &g[i * len * c..(i + 1) * len * c]);
                }
            }
            Op::Reshape { a } => add_into(slot(adj, nodes, *a), g),
            Op::Attention(cache) => self.attention_backward(cache, g, adj),
        }
    }

    fn attention_backward(&self, cache: &AttentionCache, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let AttentionCache { q, k, v, batch, seq, heads, probs, .. } = cache;
        let (batch, seq, heads) = (*batch, *seq, *heads);
        let nodes = &self.nodes;
        let d = nodes[q.0].value.shape()[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
        let (rq, rk, rv) = (nodes[q.0].requires_grad, nodes[k.0].requires_grad, nodes[v.0].requires_grad);
        let numel = batch * seq * d;
        let mut dq = if rq { adj[q.0].take().unwrap_or_else(|| vec![0.0; numel]) } else { Vec::new() };
        let mut dk = if rk { adj[k.0].take().unwrap_or_else(|| vec![0.0; numel]) } else { Vec::new() };
        let mut dv = if rv { adj[v.0].take().unwrap_or_else(|| vec![0.0; numel]) } else { Vec::new() };
        let mut dp = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // SAFETY: same strided windows as the forward pass.
                unsafe {
                    if rv {
                        matrixmultiply::dgemm(
                            seq,
                            seq,
                            dh,
                            1.0,
                            p.as_ptr(),
                            1,
                            seq as isize,
                            g.as_ptr().add(off),
                            d as isize,
                            1,
                            1.0,
                            dv.as_mut_ptr().add(off),
                            d as isize,
                            1,
                        );
                    }
                    if !(rq || rk) {
                        continue;
                    }
                    matrixmultiply::dgemm(
                        seq,
                        dh,
                        seq,
                        1.0,
                        g.as_ptr().add(off),
                        d as isize,
                        1,
                        vd.as_ptr().add(off),
                        1,
                        d as isize,
                        0.0,
                        dp.as_mut_ptr(),
                        seq as isize,
                        1,
                    );
                }
                for (prow, drow) in p.chunks(seq).zip(dp.chunks_mut(seq)) {
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (dsv, &pv) in drow.iter_mut().zip(prow) {
                        *dsv = pv * (*dsv - dot) * scale;
                    }
                }
                unsafe {
                    if rq {
                        matrixmultiply::dgemm(
                            seq,
                            seq,
                            dh,
                            1.0,
                            dp.as_ptr(),
                            seq as isize,
                            1,
                            kd.as_ptr().add(off),
                            d as isize,
                            1,
                            1.0,
                            dq.as_mut_ptr().add(off),
                            d as isize,
                            1,
                        );
                    }
                    if rk {
                        matrixmultiply::dgemm(
                            seq,
                            seq,
                            dh,
                            1.0,
                            dp.as_ptr(),
                            1,
                            seq as isize,
                            qd.as_ptr().add(off),
                            d as isize,
                            1,
                            1.0,
                            dk.as_mut_ptr().add(off),
                            d as isize,
                            1,
                        );
                    }
                }
            }
        }
        // q, k, v may alias the same node; merge rather than overwrite.
        for (var, buf, on) in [(*q, dq, rq), (*k, dk, rk), (*v, dv, rv)] {
            if !on {
                continue;
            }
            match &mut adj[var.0] {
                Some(acc) => add_into(acc, &buf),
                slot @ None => *slot = Some(buf),
            }
        }
    }
}
