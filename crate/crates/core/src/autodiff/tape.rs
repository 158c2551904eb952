//! Tape-based reverse-mode differentiation over dense rank-2 tensors.
//!
//! Every primitive appends one node holding its output value and the ids of
//! its inputs. [`Tape::backward`] walks the nodes in reverse insertion order,
//! which is a reverse topological order because inputs always precede the
//! nodes that consume them.

use std::collections::HashMap;
use std::sync::Arc;

use super::param::Param;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Broadcast(Var),
    Silu(Var),
    Sigmoid(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, T, T),
    LogSoftmax(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    /// Accumulated gradient, only for leaves that require it.
    grad: Option<Vec<T>>,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bindings: HashMap<String, Var>,
}

/// How a right-hand operand is broadcast against a `[rows, cols]` left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(lhs: &[usize], rhs: &[usize]) -> Option<Bcast> {
    let (r, c) = (lhs[0], lhs[1]);
    match (rhs[0], rhs[1]) {
        (a, b) if a == r && b == c => Some(Bcast::Same),
        (1, 1) => Some(Bcast::Scalar),
        (1, b) if b == c => Some(Bcast::Row),
        (a, 1) if a == r => Some(Bcast::Col),
        _ => None,
    }
}

#[inline]
fn bidx(kind: Bcast, cols: usize, r: usize, c: usize) -> usize {
    match kind {
        Bcast::Same => r * cols + c,
        Bcast::Row => c,
        Bcast::Col => r,
        Bcast::Scalar => 0,
    }
}

/// Sum a full-shape gradient down to the broadcast operand's shape.
fn reduce_to<T: Scalar>(
    g: &[T],
    rows: usize,
    cols: usize,
    kind: Bcast,
    mut f: impl FnMut(usize, T) -> T,
) -> Vec<T> {
    let len = match kind {
        Bcast::Same => rows * cols,
        Bcast::Row => cols,
        Bcast::Col => rows,
        Bcast::Scalar => 1,
    };
    let mut out = vec![T::zero(); len];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            out[bidx(kind, cols, r, c)] += f(i, g[i]);
        }
    }
    out
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for a: [k, n], b: [k, m].
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, n: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a[p * n + i];
            let row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for a: [n, m], b: [k, m].
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            out[i * k + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

fn accumulate<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of the leaf bound to a named parameter.
    pub fn param_grad(&self, name: &str) -> Option<&[T]> {
        self.bindings.get(name).and_then(|&v| self.grad(v))
    }

    pub fn binding(&self, name: &str) -> Option<Var> {
        self.bindings.get(name).copied()
    }

    /// Reset every leaf gradient to zero.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.shape().len() == 2);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        (s[0], s[1])
    }

    /// Record a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        if t.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "leaf (rank 2 required)",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let rg = t.requires_grad();
        Ok(self.push(t.detached(), Op::Leaf, rg))
    }

    /// Record a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let t = if t.shape().len() == 2 {
            t.detached()
        } else {
            Tensor::matrix(t.rows(), t.cols(), t.into_values())
        };
        self.push(t, Op::Leaf, false)
    }

    /// Bind a named parameter, reusing the leaf if it is already on the tape.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.bindings.get(p.name()) {
            return v;
        }
        let t = p.tensor();
        let rg = t.requires_grad();
        let v = self.push(t.detached(), Op::Leaf, rg);
        self.bindings.insert(p.name().to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b), ng))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (r, c) = self.dims(a);
        let kind =
            bcast_kind(self.shape(a), self.shape(b)).ok_or_else(|| self.mismatch(name, a, b))?;
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(av[i * c + j], bv[bidx(kind, c, i, j)]));
            }
        }
        Ok((Tensor::matrix(r, c, out), self.ng(a) || self.ng(b)))
    }

    /// Elementwise `a + b`; `b` may be `[1,c]`, `[r,1]` or `[1,1]` and is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::hcat(&tensors)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::Concat(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (_, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, end],
            });
        }
        let t = self.value(a).slice_cols(start, end);
        let ng = self.ng(a);
        Ok(self.push(t, Op::SliceCols(a, start), ng))
    }

    /// `out[e] = a[idx[e]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows (index out of range)",
                lhs: self.shape(a).to_vec(),
                rhs: vec![bad],
            });
        }
        let src = self.value(a).values();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::matrix(idx.len(), c, out),
            Op::GatherRows(a, idx),
            ng,
        ))
    }

    /// `out[idx[e]] += a[e]` into `n_out` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<[usize]>, n_out: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: self.shape(a).to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows (index out of range)",
                lhs: vec![n_out, c],
                rhs: vec![bad],
            });
        }
        let src = self.value(a).values();
        let mut out = vec![T::zero(); n_out * c];
        for (e, &i) in idx.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] += src[e * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::matrix(n_out, c, out),
            Op::ScatterAddRows(a, idx),
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.values().iter().copied().sum();
        let m = s / T::of(v.numel() as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// Row-wise sum: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).values();
        let out = (0..r)
            .map(|i| v[i * c..(i + 1) * c].iter().copied().sum())
            .collect();
        let ng = self.ng(a);
        self.push(Tensor::matrix(r, 1, out), Op::SumCols(a), ng)
    }

    /// Expand a `[1,c]`, `[r,1]` or `[1,1]` tensor to `[rows, cols]`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let target = [rows, cols];
        let kind = bcast_kind(&target, self.shape(a)).ok_or_else(|| Error::ShapeMismatch {
            op: "broadcast",
            lhs: target.to_vec(),
            rhs: self.shape(a).to_vec(),
        })?;
        let v = self.value(a).values();
        let out = Tensor::from_fn(rows, cols, |r, c| v[bidx(kind, cols, r, c)]);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Broadcast(a), ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(t, Op::Silu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(t, Op::Square(a), ng)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.sqrt());
        let ng = self.ng(a);
        self.push(t, Op::Sqrt(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let t = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(t, Op::Clamp(a, lo, hi), ng)
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).values();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(r, c, out), Op::LogSoftmax(a), ng)
    }

    /// Back-propagate from a scalar node, adding into leaf gradient slots.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.backward_node(id, &op, g, &mut adj);
        }
        Ok(())
    }

    fn backward_node(&mut self, id: usize, op: &Op<T>, g: Vec<T>, adj: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[id].value;
        let (r, c) = (out.rows(), out.cols());
        match op {
            Op::Leaf => match &mut self.nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            },
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                if self.ng(*a) {
                    let ga = matmul_nt(&g, self.value(*b).values(), n, m, k);
                    accumulate(adj, *a, ga);
                }
                if self.ng(*b) {
                    let gb = matmul_tn(self.value(*a).values(), &g, n, k, m);
                    accumulate(adj, *b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                let kind = bcast_kind(&[r, c], self.shape(*b)).unwrap();
                if self.ng(*b) {
                    let gb = reduce_to(&g, r, c, kind, |_, x| x * sign);
                    accumulate(adj, *b, gb);
                }
                if self.ng(*a) {
                    accumulate(adj, *a, g);
                }
            }
            Op::Mul(a, b) => {
                let kind = bcast_kind(&[r, c], self.shape(*b)).unwrap();
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                if self.ng(*b) {
                    let gb = reduce_to(&g, r, c, kind, |i, x| x * av[i]);
                    accumulate(adj, *b, gb);
                }
                if self.ng(*a) {
                    let ga = (0..r * c)
                        .map(|i| g[i] * bv[bidx(kind, c, i / c, i % c)])
                        .collect();
                    accumulate(adj, *a, ga);
                }
            }
            Op::Div(a, b) => {
                let kind = bcast_kind(&[r, c], self.shape(*b)).unwrap();
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                if self.ng(*b) {
                    let gb = reduce_to(&g, r, c, kind, |i, x| {
                        let d = bv[bidx(kind, c, i / c, i % c)];
                        -x * av[i] / (d * d)
                    });
                    accumulate(adj, *b, gb);
                }
                if self.ng(*a) {
                    let ga = (0..r * c)
                        .map(|i| g[i] / bv[bidx(kind, c, i / c, i % c)])
                        .collect();
                    accumulate(adj, *a, ga);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(adj, *a, g.into_iter().map(|x| x * s).collect());
            }
            Op::AddScalar(a) => accumulate(adj, *a, g),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * c + offset..i * c + offset + pc]);
                        }
                        accumulate(adj, p, gp);
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let (ar, ac) = self.dims(*a);
                let mut ga = vec![T::zero(); ar * ac];
                for i in 0..r {
                    ga[i * ac + start..i * ac + start + c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                accumulate(adj, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let ar = self.dims(*a).0;
                let mut ga = vec![T::zero(); ar * c];
                for (e, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g[e * c + j];
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::ScatterAddRows(a, idx) => {
                let mut ga = Vec::with_capacity(idx.len() * c);
                for &i in idx.iter() {
                    ga.extend_from_slice(&g[i * c..(i + 1) * c]);
                }
                accumulate(adj, *a, ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(adj, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                accumulate(adj, *a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::SumCols(a) => {
                let ac = self.dims(*a).1;
                let ga = (0..r * ac).map(|i| g[i / ac]).collect();
                accumulate(adj, *a, ga);
            }
            Op::Broadcast(a) => {
                let kind = bcast_kind(&[r, c], self.shape(*a)).unwrap();
                accumulate(adj, *a, reduce_to(&g, r, c, kind, |_, x| x));
            }
            Op::Silu(a) => {
                let xv = self.value(*a).values();
                let ga = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &x)| {
                        let s = sigmoid(x);
                        gi * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                accumulate(adj, *a, ga);
            }
            Op::Sigmoid(a) => {
                let yv = out.values();
                let ga = g
                    .iter()
                    .zip(yv)
                    .map(|(&gi, &y)| gi * y * (T::one() - y))
                    .collect();
                accumulate(adj, *a, ga);
            }
            Op::Square(a) => {
                let xv = self.value(*a).values();
                let two = T::of(2.0);
                let ga = g.iter().zip(xv).map(|(&gi, &x)| gi * two * x).collect();
                accumulate(adj, *a, ga);
            }
            Op::Sqrt(a) => {
                let yv = out.values();
                let half = T::of(0.5);
                let ga = g
                    .iter()
                    .zip(yv)
                    .map(|(&gi, &y)| {
                        if y > T::zero() {
                            gi * half / y
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(adj, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let xv = self.value(*a).values();
                let ga = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &x)| if x >= *lo && x <= *hi { gi } else { T::zero() })
                    .collect();
                accumulate(adj, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let yv = out.values();
                let mut ga = Vec::with_capacity(r * c);
                for i in 0..r {
                    let gs: T = g[i * c..(i + 1) * c].iter().copied().sum();
                    for j in 0..c {
                        ga.push(g[i * c + j] - yv[i * c + j].exp() * gs);
                    }
                }
                accumulate(adj, *a, ga);
            }
        }
    }
}
