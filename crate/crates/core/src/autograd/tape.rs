// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every primitive appends one node to the tape holding its forward value and
//! the handles of its inputs. Because a node can only reference nodes created
//! before it, the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Binary elementwise ops broadcast their smaller operand when its shape is a
//! suffix of the larger one's (this covers scalars and per-feature biases);
//! anything else has to be reshaped explicitly.

use crate::autograd::tensor::{Element, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Gelu,
    Relu,
    Sigmoid,
    Log,
    Exp,
    Clamp01,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    Binary { kind: Binary, a: Var, b: Var },
    Affine { x: Var, scale: T },
    Unary { kind: Unary, x: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    TransposeLast2 { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, rstd: Vec<T> },
    Gather { table: Var, rows: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_calls: usize,
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c[m,n] = a[m,k] b[k,n]`, accumulated over `k` in increasing order.
fn mm<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// `c[m,k] = a[m,n] b[k,n]^T`.
fn mm_bt<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

/// `c[k,n] = a[m,k]^T b[m,n]`.
fn mm_at<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b = *b + x),
        None => *slot = Some(g),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_calls: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of completed [`Tape::backward`] sweeps.
    pub fn backward_calls(&self) -> usize {
        self.backward_calls
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `t`; it participates in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(true);
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last loss(es) with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Copies the gradient of `v` into the gradient buffer of `target`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![T::zero(); target.len()]),
        }
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// `a[..., m, k] @ b[k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return shape_err("matmul", &[&sa, &sb]);
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = self.value(a).len() / k.max(1);
        let data = mm(self.value(a).data(), self.value(b).data(), rows, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::MatMul { a, b }, rg))
    }

    /// `a[B, m, k] @ b[B, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("batch_matmul", &[&sa, &sb]);
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = Vec::with_capacity(bs * m * n);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..bs {
                data.extend(mm(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bs, m, n], data)?, Op::BatchMatMul { a, b }, rg))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return shape_err("transpose_last2", &[&s]);
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batches = self.value(x).len() / (r * c).max(1);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for b in 0..batches {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    data[off + j * r + i] = src[off + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::TransposeLast2 { x }, rg))
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        let suffix =
            |big: &[usize], small: &[usize]| small.len() <= big.len() && big[big.len() - small.len()..] == *small;
        let a_is_big = if la >= lb { lb == 1 || suffix(&sa, &sb) } else { false };
        let b_is_big = !a_is_big && (la == 1 || suffix(&sb, &sa));
        if !a_is_big && !b_is_big {
            return shape_err(
                match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                &[&sa, &sb],
            );
        }
        let shape = if a_is_big { sa } else { sb };
        let n = la.max(lb);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data: Vec<T> = (0..n).map(|i| f(av[i % la], bv[i % lb])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `x * scale + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * scale + shift).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, data).expect("affine preserves shape"),
            Op::Affine { x, scale },
            rg,
        )
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f = |v: T| match kind {
            Unary::Gelu => gelu(v),
            Unary::Relu => v.max(T::zero()),
            Unary::Sigmoid => sigmoid(v),
            Unary::Log => v.ln(),
            Unary::Exp => v.exp(),
            Unary::Clamp01 => v.max(T::zero()).min(T::one()),
        };
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, data).expect("unary preserves shape"),
            Op::Unary { kind, x },
            rg,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    /// Clamps into `[0, 1]`; gradient flows only where the input lies strictly
    /// inside the open interval.
    pub fn clamp01(&mut self, x: Var) -> Var {
        self.unary(Unary::Clamp01, x)
    }

    // ------------------------------------------------------------------
    // Structural
    // ------------------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat", &[]);
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", &[&base]);
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
                return shape_err("concat", &shapes);
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return shape_err("slice", &[&s, &[axis, start, end]]);
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            let s = self.shape(x).to_vec();
            return shape_err("reshape", &[&s, shape]);
        }
        let data = self.value(x).data().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Reshape { x }, rg))
    }

    /// Row gather from a 2-D table: `out[i] = table[rows[i]]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return shape_err("gather_rows", &[&s, &[rows.len()]]);
        }
        let d = s[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], data)?,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup; identical to [`Tape::gather_rows`].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    // ------------------------------------------------------------------
    // Normalizations and reductions
    // ------------------------------------------------------------------

    fn last_dim(&self, x: Var, op: &'static str) -> Result<usize> {
        match self.shape(x).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => shape_err(op, &[self.shape(x)]),
        }
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim(x, "softmax")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { x }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim(x, "log_softmax")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::LogSoftmax { x }, rg))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    /// The affine part is applied separately with `mul`/`add`.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let d = self.last_dim(x, "layer_norm")?;
        let mut data = self.value(x).data().to_vec();
        let dn = T::from_f64(d as f64);
        let mut rstd = Vec::with_capacity(data.len() / d);
        for row in data.chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::LayerNorm { x, rstd }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.value(x).data().iter().copied().sum::<T>() / T::from_f64(n as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// Gradients are added to whatever previous calls left behind; call
    /// [`Tape::zero_grad`] to start over.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut g: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            g[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = g[i].take() else { continue };
            self.backprop_node(i, &gy, &mut g);
            g[i] = Some(gy);
        }
        for (slot, gi) in self.grads.iter_mut().zip(g) {
            if let Some(gi) = gi {
                add_into(slot, gi);
            }
        }
        self.backward_calls += 1;
        Ok(())
    }

    fn send(&self, g: &mut [Option<Vec<T>>], to: Var, contrib: Vec<T>) {
        if self.rg(to) {
            add_into(&mut g[to.0], contrib);
        }
    }

    fn backprop_node(&self, i: usize, gy: &[T], g: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let rows = self.value(*a).len() / k.max(1);
                if self.rg(*a) {
                    let ga = mm_bt(gy, self.value(*b).data(), rows, n, k);
                    self.send(g, *a, ga);
                }
                if self.rg(*b) {
                    let gb = mm_at(self.value(*a).data(), gy, rows, k, n);
                    self.send(g, *b, gb);
                }
            }
            Op::BatchMatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut ga = Vec::with_capacity(bs * m * k);
                    for t in 0..bs {
                        ga.extend(mm_bt(
                            &gy[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            m,
                            n,
                            k,
                        ));
                    }
                    self.send(g, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Vec::with_capacity(bs * k * n);
                    for t in 0..bs {
                        gb.extend(mm_at(
                            &av[t * m * k..(t + 1) * m * k],
                            &gy[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    self.send(g, *b, gb);
                }
            }
            Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (la, lb) = (av.len(), bv.len());
                let n = gy.len();
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); la];
                    for j in 0..n {
                        let d = match kind {
                            Binary::Add | Binary::Sub => gy[j],
                            Binary::Mul => gy[j] * bv[j % lb],
                        };
                        ga[j % la] = ga[j % la] + d;
                    }
                    self.send(g, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); lb];
                    for j in 0..n {
                        let d = match kind {
                            Binary::Add => gy[j],
                            Binary::Sub => -gy[j],
                            Binary::Mul => gy[j] * av[j % la],
                        };
                        gb[j % lb] = gb[j % lb] + d;
                    }
                    self.send(g, *b, gb);
                }
            }
            Op::Affine { x, scale } => {
                let gx = gy.iter().map(|&v| v * *scale).collect();
                self.send(g, *x, gx);
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                let gx = gy
                    .iter()
                    .zip(xv)
                    .zip(y)
                    .map(|((&gv, &xi), &yi)| {
                        gv * match kind {
                            Unary::Gelu => gelu_grad(xi),
                            Unary::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sigmoid => yi * (T::one() - yi),
                            Unary::Log => T::one() / xi,
                            Unary::Exp => yi,
                            Unary::Clamp01 => {
                                if xi > T::zero() && xi < T::one() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        }
                    })
                    .collect();
                self.send(g, *x, gx);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, _, inner) = split_axis(shape, *axis);
                let row = shape[*axis] * inner;
                let mut off = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gv.extend_from_slice(&gy[o * row + off..o * row + off + len]);
                        }
                        self.send(g, v, gv);
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, len, inner) = split_axis(sx, *axis);
                let width = node.value.shape()[*axis] * inner;
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    gx[base..base + width].copy_from_slice(&gy[o * width..(o + 1) * width]);
                }
                self.send(g, *x, gx);
            }
            Op::Reshape { x } => self.send(g, *x, gy.to_vec()),
            Op::TransposeLast2 { x } => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batches = gy.len() / (r * c).max(1);
                let mut gx = vec![T::zero(); gy.len()];
                for b in 0..batches {
                    let off = b * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            gx[off + j * r + i] = gy[off + i * c + j];
                        }
                    }
                }
                self.send(g, *x, gx);
            }
            Op::Softmax { x } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(gy.len());
                for (yr, gr) in y.chunks(d).zip(gy.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                self.send(g, *x, gx);
            }
            Op::LogSoftmax { x } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(gy.len());
                for (yr, gr) in y.chunks(d).zip(gy.chunks(d)) {
                    let total: T = gr.iter().copied().sum();
                    gx.extend(yr.iter().zip(gr).map(|(&a, &b)| b - a.exp() * total));
                }
                self.send(g, *x, gx);
            }
            Op::LayerNorm { x, rstd } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let dn = T::from_f64(d as f64);
                let mut gx = Vec::with_capacity(gy.len());
                for ((yr, gr), &r) in y.chunks(d).zip(gy.chunks(d)).zip(rstd) {
                    let mg = gr.iter().copied().sum::<T>() / dn;
                    let mgy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    gx.extend(yr.iter().zip(gr).map(|(&a, &b)| r * (b - mg - a * mgy)));
                }
                self.send(g, *x, gx);
            }
            Op::Gather { table, rows } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![T::zero(); self.value(*table).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gt[r * d + j] = gt[r * d + j] + gy[i * d + j];
                    }
                }
                self.send(g, *table, gt);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.send(g, *x, vec![gy[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let v = gy[0] / T::from_f64(n.max(1) as f64);
                self.send(g, *x, vec![v; n]);
            }
        }
    }
}
