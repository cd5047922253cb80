//! Reverse-mode differentiation over the small set of operations the models
//! in this crate need.
//!
//! Every value is a dense row-major buffer. Most operations view their input as
//! a matrix whose width is the last dimension. Operations that act per batch
//! element ("group" operations) split the buffer into `groups` equal
//! contiguous chunks.

use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Sin(Var),
    Square(Var),
    Sqrt(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    GroupMul { x: Var, s: Var, groups: usize },
    GroupAdd { x: Var, s: Var, groups: usize },
    GroupScale { x: Var, coef: Vec<T> },
    AddRows { x: Var, rows: Var, groups: usize },
    SliceCols { x: Var, start: usize },
    ConcatSeq { a: Var, b: Var, groups: usize },
    SliceSeq { x: Var, groups: usize, start: usize },
    ReplaceGroups { x: Var, null: Var, mask: Vec<bool> },
    DwConv { x: Var, kernel: Var, groups: usize },
    Attention { q: Var, k: Var, v: Var, groups: usize, heads: usize, probs: Vec<T> },
    SumGroups { x: Var, groups: usize },
    Mean(Var),
    MulConst { x: Var, c: Vec<T> },
    Reshape(Var),
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a computation, replayed backwards by [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar output with respect to every recorded value.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the right length if nothing flowed there.
    pub fn take_or_zeros(&mut self, v: Var, len: usize) -> Vec<T> {
        self.grads.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| vec![T::zero(); len])
    }
}

fn width(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Only leaves created with `requires_grad` receive gradients.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are well-formed")
    }

    pub fn is_finite(&self, v: Var) -> bool {
        self.nodes[v.0].value.iter().all(|x| x.is_finite())
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        let w = width(s);
        (self.nodes[v.0].value.len() / w, w)
    }

    /// `a [m, k] @ b [k, n]`; `a` may carry extra leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let bs = self.shape(b).to_vec();
        ensure(bs.len() == 2 && bs[0] == k, || format!("matmul inner dims: {:?} x {:?}", self.shape(a), bs))?;
        let n = bs[1];
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), false, self.value(b), false, T::zero(), &mut out);
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(out, shape, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, w) = self.rows_cols(x);
        ensure(self.value(bias).len() == w, || format!("bias width {} vs {}", self.value(bias).len(), w))?;
        let b = self.value(bias);
        let out: Vec<T> = self.value(x).iter().enumerate().map(|(i, &v)| v + b[i % w]).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x @ w + b`, weights stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        ensure(self.value(a).len() == self.value(b).len(), || {
            format!("elementwise shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b))
        })?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sin(), Op::Sin(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    /// Elementwise product with a constant buffer of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        ensure(c.len() == self.value(x).len(), || "mul_const length mismatch".into())?;
        let out = self.value(x).iter().zip(&c).map(|(&v, &k)| v * k).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::MulConst { x, c }, &[x]))
    }

    /// Row-wise normalization to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let (rows, w) = self.rows_cols(x);
        let xs = self.value(x);
        let wt = T::of(w as f64);
        let mut out = vec![T::zero(); xs.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * w..(r + 1) * w];
            let mean = row.iter().copied().sum::<T>() / wt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wt;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in out[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::LayerNorm { x, rstd }, &[x])
    }

    fn group_check(&self, x: Var, s: Var, groups: usize) -> Result<(usize, usize)> {
        let (rows, w) = self.rows_cols(x);
        ensure(groups > 0 && rows % groups == 0, || format!("{rows} rows not divisible into {groups} groups"))?;
        ensure(self.value(s).len() == groups * w, || {
            format!("group operand has {} values, expected {}x{}", self.value(s).len(), groups, w)
        })?;
        Ok((rows / groups, w))
    }

    /// `x[g, l, d] * s[g, d]`.
    pub fn group_mul(&mut self, x: Var, s: Var, groups: usize) -> Result<Var> {
        let (per, w) = self.group_check(x, s, groups)?;
        let sv = self.value(s);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[(i / (per * w)) * w + i % w])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::GroupMul { x, s, groups }, &[x, s]))
    }

    /// `x[g, l, d] + s[g, d]`.
    pub fn group_add(&mut self, x: Var, s: Var, groups: usize) -> Result<Var> {
        let (per, w) = self.group_check(x, s, groups)?;
        let sv = self.value(s);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + sv[(i / (per * w)) * w + i % w])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::GroupAdd { x, s, groups }, &[x, s]))
    }

    /// Multiplies each of `coef.len()` contiguous chunks by a constant.
    pub fn group_scale(&mut self, x: Var, coef: Vec<T>) -> Result<Var> {
        let n = self.value(x).len();
        ensure(!coef.is_empty() && n.is_multiple_of(coef.len()), || "group_scale chunking".into())?;
        let chunk = n / coef.len();
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v * coef[i / chunk]).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::GroupScale { x, coef }, &[x]))
    }

    /// `x[g, l, d] + rows[l, d]` (positional tables).
    pub fn add_rows(&mut self, x: Var, rows: Var, groups: usize) -> Result<Var> {
        let (total, w) = self.rows_cols(x);
        ensure(groups > 0 && total % groups == 0, || "add_rows grouping".into())?;
        let per = total / groups;
        ensure(self.value(rows).len() >= per * w && self.rows_cols(rows).1 == w, || {
            format!("positional table {:?} too small for {per} rows of width {w}", self.shape(rows))
        })?;
        let rv = self.value(rows);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v + rv[i % (per * w)]).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::AddRows { x, rows, groups }, &[x, rows]))
    }

    /// Columns `[start, start + len)` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, w) = self.rows_cols(x);
        ensure(start + len <= w && len > 0, || format!("column slice {start}+{len} of {w}"))?;
        let xs = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xs[r * w + start..r * w + start + len]);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(out, shape, Op::SliceCols { x, start }, &[x]))
    }

    /// Per group, rows of `a` followed by rows of `b`. Result is `[groups * (la + lb), w]`.
    pub fn concat_seq(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (ra, w) = self.rows_cols(a);
        let (rb, wb) = self.rows_cols(b);
        ensure(w == wb && ra % groups == 0 && rb % groups == 0, || "concat_seq layout".into())?;
        let (la, lb) = (ra / groups, rb / groups);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity((ra + rb) * w);
        for g in 0..groups {
            out.extend_from_slice(&av[g * la * w..(g + 1) * la * w]);
            out.extend_from_slice(&bv[g * lb * w..(g + 1) * lb * w]);
        }
        Ok(self.push(out, vec![ra + rb, w], Op::ConcatSeq { a, b, groups }, &[a, b]))
    }

    /// Per group, rows `[start, start + len)`.
    pub fn slice_seq(&mut self, x: Var, groups: usize, start: usize, len: usize) -> Result<Var> {
        let (rows, w) = self.rows_cols(x);
        ensure(groups > 0 && rows % groups == 0 && start + len <= rows / groups && len > 0, || {
            "slice_seq bounds".into()
        })?;
        let per = rows / groups;
        let xs = self.value(x);
        let mut out = Vec::with_capacity(groups * len * w);
        for g in 0..groups {
            let base = (g * per + start) * w;
            out.extend_from_slice(&xs[base..base + len * w]);
        }
        Ok(self.push(out, vec![groups * len, w], Op::SliceSeq { x, groups, start }, &[x]))
    }

    /// Replaces every row of group `g` with the `null` row wherever `mask[g]`.
    pub fn replace_groups(&mut self, x: Var, null: Var, mask: Vec<bool>) -> Result<Var> {
        let (rows, w) = self.rows_cols(x);
        let groups = mask.len();
        ensure(groups > 0 && rows % groups == 0, || "replace_groups grouping".into())?;
        ensure(self.value(null).len() == w, || "null token width".into())?;
        let per = rows / groups;
        let nv = self.value(null).to_vec();
        let mut out = self.value(x).to_vec();
        for (g, &m) in mask.iter().enumerate() {
            if m {
                for r in 0..per {
                    let base = (g * per + r) * w;
                    out[base..base + w].copy_from_slice(&nv);
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::ReplaceGroups { x, null, mask }, &[x, null]))
    }

    /// Per-channel 1-D convolution along the sequence axis with zero padding.
    /// `kernel` is `[w, ksize]` with odd `ksize`, centred.
    pub fn dw_conv(&mut self, x: Var, kernel: Var, groups: usize) -> Result<Var> {
        let (rows, w) = self.rows_cols(x);
        let ks = self.shape(kernel).to_vec();
        ensure(ks.len() == 2 && ks[0] == w && ks[1] % 2 == 1, || format!("depthwise kernel {ks:?} for width {w}"))?;
        ensure(groups > 0 && rows % groups == 0 && rows > 0, || "dw_conv grouping".into())?;
        let (len, ksize) = (rows / groups, ks[1]);
        let half = (ksize / 2) as isize;
        let (xs, kv) = (self.value(x), self.value(kernel));
        let mut out = vec![T::zero(); xs.len()];
        for g in 0..groups {
            for t in 0..len {
                let o = &mut out[(g * len + t) * w..(g * len + t + 1) * w];
                for j in 0..ksize {
                    let src = t as isize + j as isize - half;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let row = &xs[(g * len + src as usize) * w..(g * len + src as usize + 1) * w];
                    for c in 0..w {
                        o[c] = o[c] + kv[c * ksize + j] * row[c];
                    }
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::DwConv { x, kernel, groups }, &[x, kernel]))
    }

    /// Full (non-causal) multi-head scaled dot-product attention. `q`, `k`, `v`
    /// are `[groups * len, d]`, heads split `d` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Result<Var> {
        let (rows, d) = self.rows_cols(q);
        ensure(rows > 0 && groups > 0 && rows % groups == 0, || "attention needs a non-empty sequence".into())?;
        ensure(heads > 0 && d % heads == 0, || format!("width {d} not divisible by {heads} heads"))?;
        ensure(self.rows_cols(k) == (rows, d) && self.rows_cols(v) == (rows, d), || "q/k/v shape mismatch".into())?;
        let len = rows / groups;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); groups * heads * len * len];
        let mut out = vec![T::zero(); rows * d];
        let mut row_scores = vec![T::zero(); len];
        for g in 0..groups {
            for h in 0..heads {
                let p = &mut probs[(g * heads + h) * len * len..(g * heads + h + 1) * len * len];
                for i in 0..len {
                    let qi = &qv[(g * len + i) * d + h * dh..(g * len + i) * d + (h + 1) * dh];
                    let mut mx = T::neg_infinity();
                    for j in 0..len {
                        let kj = &kv[(g * len + j) * d + h * dh..(g * len + j) * d + (h + 1) * dh];
                        let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        row_scores[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = T::zero();
                    for j in 0..len {
                        let e = (row_scores[j] - mx).exp();
                        p[i * len + j] = e;
                        z = z + e;
                    }
                    let o = &mut out[(g * len + i) * d + h * dh..(g * len + i) * d + (h + 1) * dh];
                    for j in 0..len {
                        let pij = p[i * len + j] / z;
                        p[i * len + j] = pij;
                        let vj = &vv[(g * len + j) * d + h * dh..(g * len + j) * d + (h + 1) * dh];
                        for c in 0..dh {
                            o[c] = o[c] + pij * vj[c];
                        }
                    }
                }
            }
        }
        let shape = self.shape(q).to_vec();
        Ok(self.push(out, shape, Op::Attention { q, k, v, groups, heads, probs }, &[q, k, v]))
    }

    /// Sum of each of `groups` contiguous chunks; result `[groups]`.
    pub fn sum_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        let n = self.value(x).len();
        ensure(groups > 0 && n.is_multiple_of(groups), || "sum_groups chunking".into())?;
        let chunk = n / groups;
        let out = self.value(x).chunks(chunk).map(|c| c.iter().copied().sum()).collect();
        Ok(self.push(out, vec![groups], Op::SumGroups { x, groups }, &[x]))
    }

    /// Mean of all values; result `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let m = xs.iter().copied().sum::<T>() / T::of(xs.len() as f64);
        self.push(vec![m], vec![1], Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.sum_groups(x, 1).expect("one group always divides")
    }

    /// Reinterprets the buffer with a new shape of equal size.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        ensure(shape.iter().product::<usize>() == self.value(x).len(), || {
            format!("cannot reshape {:?} into {shape:?}", self.shape(x))
        })?;
        let out = self.value(x).to_vec();
        Ok(self.push(out, shape.to_vec(), Op::Reshape(x), &[x]))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        ensure(self.nodes[output.0].value.len() == 1, || "backward needs a scalar output".into())?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(g);
    }

    fn propagate(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| -> &[T] { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                self.acc(grads, *a, |g| T::gemm(m, n, k, T::one(), gout, false, val(*b), true, T::one(), g));
                self.acc(grads, *b, |g| T::gemm(k, m, n, T::one(), val(*a), true, gout, false, T::one(), g));
            }
            Op::AddBias { x, bias } => {
                self.acc(grads, *x, |g| add_into(g, gout));
                let w = self.nodes[bias.0].value.len();
                self.acc(grads, *bias, |g| {
                    for (i, &d) in gout.iter().enumerate() {
                        g[i % w] = g[i % w] + d;
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gout));
                self.acc(grads, *b, |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gout));
                self.acc(grads, *b, |g| g.iter_mut().zip(gout).for_each(|(g, &d)| *g = *g - d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i] * av[i];
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, |g| g.iter_mut().zip(gout).for_each(|(g, &d)| *g = *g + d * *s)),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |g| add_into(g, gout)),
            Op::Silu(x) => {
                let xv = val(*x);
                self.acc(grads, *x, |g| {
                    for i in 0..g.len() {
                        let s = sigmoid(xv[i]);
                        g[i] = g[i] + gout[i] * s * (T::one() + xv[i] * (T::one() - s));
                    }
                });
            }
            Op::Sin(x) => {
                let xv = val(*x);
                self.acc(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i] * xv[i].cos();
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                self.acc(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i] * (xv[i] + xv[i]);
                    }
                });
            }
            Op::Sqrt(x) => {
                let yv = &node.value;
                self.acc(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i] / (yv[i] + yv[i]);
                    }
                });
            }
            Op::MulConst { x, c } => self.acc(grads, *x, |g| {
                for i in 0..g.len() {
                    g[i] = g[i] + gout[i] * c[i];
                }
            }),
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let w = width(&node.shape);
                let wt = T::of(w as f64);
                self.acc(grads, *x, |g| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (yr, dy) = (&y[r * w..(r + 1) * w], &gout[r * w..(r + 1) * w]);
                        let mean_dy = dy.iter().copied().sum::<T>() / wt;
                        let mean_dyy = dy.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / wt;
                        for c in 0..w {
                            g[r * w + c] = g[r * w + c] + rs * (dy[c] - mean_dy - yr[c] * mean_dyy);
                        }
                    }
                });
            }
            Op::GroupMul { x, s, groups } => {
                let w = width(&node.shape);
                let per_chunk = node.value.len() / groups;
                let (xv, sv) = (val(*x), val(*s));
                self.acc(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i] * sv[(i / per_chunk) * w + i % w];
                    }
                });
                self.acc(grads, *s, |g| {
                    for i in 0..gout.len() {
                        let j = (i / per_chunk) * w + i % w;
                        g[j] = g[j] + gout[i] * xv[i];
                    }
                });
            }
            Op::GroupAdd { x, s, groups } => {
                let w = width(&node.shape);
                let per_chunk = node.value.len() / groups;
                self.acc(grads, *x, |g| add_into(g, gout));
                self.acc(grads, *s, |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        let j = (i / per_chunk) * w + i % w;
                        g[j] = g[j] + go;
                    }
                });
            }
            Op::GroupScale { x, coef } => {
                let chunk = node.value.len() / coef.len();
                self.acc(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i] * coef[i / chunk];
                    }
                });
            }
            Op::AddRows { x, rows, groups } => {
                let per_chunk = node.value.len() / groups;
                self.acc(grads, *x, |g| add_into(g, gout));
                self.acc(grads, *rows, |g| {
                    for i in 0..gout.len() {
                        g[i % per_chunk] = g[i % per_chunk] + gout[i];
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let len = width(&node.shape);
                let w = width(&self.nodes[x.0].shape);
                self.acc(grads, *x, |g| {
                    for (r, chunk) in gout.chunks(len).enumerate() {
                        for c in 0..len {
                            g[r * w + start + c] = g[r * w + start + c] + chunk[c];
                        }
                    }
                });
            }
            Op::ConcatSeq { a, b, groups } => {
                let w = width(&node.shape);
                let la = self.nodes[a.0].value.len() / groups / w;
                let lb = self.nodes[b.0].value.len() / groups / w;
                self.acc(grads, *a, |g| {
                    for gi in 0..*groups {
                        let src = gi * (la + lb) * w;
                        add_into(&mut g[gi * la * w..(gi + 1) * la * w], &gout[src..src + la * w]);
                    }
                });
                self.acc(grads, *b, |g| {
                    for gi in 0..*groups {
                        let src = (gi * (la + lb) + la) * w;
                        add_into(&mut g[gi * lb * w..(gi + 1) * lb * w], &gout[src..src + lb * w]);
                    }
                });
            }
            Op::SliceSeq { x, groups, start } => {
                let w = width(&node.shape);
                let len = node.value.len() / groups / w;
                let per = self.nodes[x.0].value.len() / groups / w;
                self.acc(grads, *x, |g| {
                    for gi in 0..*groups {
                        let dst = (gi * per + start) * w;
                        add_into(&mut g[dst..dst + len * w], &gout[gi * len * w..(gi + 1) * len * w]);
                    }
                });
            }
            Op::ReplaceGroups { x, null, mask } => {
                let w = width(&node.shape);
                let chunk = node.value.len() / mask.len();
                self.acc(grads, *x, |g| {
                    for (gi, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut g[gi * chunk..(gi + 1) * chunk], &gout[gi * chunk..(gi + 1) * chunk]);
                        }
                    }
                });
                self.acc(grads, *null, |g| {
                    for (gi, &m) in mask.iter().enumerate() {
                        if m {
                            for (i, &d) in gout[gi * chunk..(gi + 1) * chunk].iter().enumerate() {
                                g[i % w] = g[i % w] + d;
                            }
                        }
                    }
                });
            }
            Op::DwConv { x, kernel, groups } => {
                let w = width(&node.shape);
                let ksize = self.nodes[kernel.0].shape[1];
                let len = node.value.len() / groups / w;
                let half = (ksize / 2) as isize;
                let (xv, kv) = (val(*x), val(*kernel));
                self.acc(grads, *x, |g| {
                    for gi in 0..*groups {
                        for t in 0..len {
                            let dy = &gout[(gi * len + t) * w..(gi * len + t + 1) * w];
                            for j in 0..ksize {
                                let src = t as isize + j as isize - half;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let base = (gi * len + src as usize) * w;
                                for c in 0..w {
                                    g[base + c] = g[base + c] + kv[c * ksize + j] * dy[c];
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *kernel, |g| {
                    for gi in 0..*groups {
                        for t in 0..len {
                            let dy = &gout[(gi * len + t) * w..(gi * len + t + 1) * w];
                            for j in 0..ksize {
                                let src = t as isize + j as isize - half;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let base = (gi * len + src as usize) * w;
                                for c in 0..w {
                                    g[c * ksize + j] = g[c * ksize + j] + xv[base + c] * dy[c];
                                }
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, groups, heads, probs } => {
                self.attention_backward(node, gout, grads, (*q, *k, *v), *groups, *heads, probs);
            }
            Op::SumGroups { x, groups } => {
                let chunk = self.nodes[x.0].value.len() / groups;
                self.acc(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i / chunk];
                    }
                });
            }
            Op::Mean(x) => {
                let n = T::of(self.nodes[x.0].value.len() as f64);
                self.acc(grads, *x, |g| g.iter_mut().for_each(|g| *g = *g + gout[0] / n));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node<T>,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
        (q, k, v): (Var, Var, Var),
        groups: usize,
        heads: usize,
        probs: &[T],
    ) {
        let d = width(&node.shape);
        let len = node.value.len() / d / groups;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); len];
        for g in 0..groups {
            for h in 0..heads {
                let p = &probs[(g * heads + h) * len * len..(g * heads + h + 1) * len * len];
                let off = |i: usize| (g * len + i) * d + h * dh;
                for i in 0..len {
                    let dout = &gout[off(i)..off(i) + dh];
                    // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                    for j in 0..len {
                        let vj = &vv[off(j)..off(j) + dh];
                        dp[j] = dout.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        let pij = p[i * len + j];
                        for c in 0..dh {
                            dv[off(j) + c] = dv[off(j) + c] + pij * dout[c];
                        }
                    }
                    let rowdot: T = (0..len).map(|j| p[i * len + j] * dp[j]).sum();
                    for j in 0..len {
                        let ds = p[i * len + j] * (dp[j] - rowdot) * scale;
                        for c in 0..dh {
                            dq[off(i) + c] = dq[off(i) + c] + ds * kv[off(j) + c];
                            dk[off(j) + c] = dk[off(j) + c] + ds * qv[off(i) + c];
                        }
                    }
                }
            }
        }
        self.acc(grads, q, |g| add_into(g, &dq));
        self.acc(grads, k, |g| add_into(g, &dk));
        self.acc(grads, v, |g| add_into(g, &dv));
    }
}

fn add_into<T: Scalar>(g: &mut [T], d: &[T]) {
    for (g, &d) in g.iter_mut().zip(d) {
        *g = *g + d;
    }
}
