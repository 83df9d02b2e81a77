//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates `∂loss/∂node` into each node that requires a gradient.
//! Repeated calls add to the stored gradients until [`Graph::zero_grad`].

use super::kernels::{mm_acc, mm_nt_acc, mm_tn_acc};
use super::Tensor;
use crate::error::{contract, shape_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm(Var),
    NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Pick { x: Var, idx: Vec<usize> },
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Per-row cache (inverse std for layernorm, norms for normalize).
    aux: Vec<T>,
}

/// Layernorm variance floor.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape.len() {
        1 => Some((1, shape[0])),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, aux: Vec<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false, Vec::new())
    }

    /// Leaf whose gradient is tracked when `t.requires_grad()`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: rg,
            grad: None,
        };
        self.push(value, Op::Leaf, rg, Vec::new())
    }

    /// Leaf with explicit tracking flag.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let mut t = t;
        t.set_requires_grad(requires_grad);
        t.grad = None;
        self.push(t, Op::Leaf, requires_grad, Vec::new())
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

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        as_matrix(self.shape(v))
            .ok_or_else(|| shape_err(op, format!("expected matrix, got {:?}", self.shape(v))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} · {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg, Vec::new()))
    }

    /// `a · bᵀ`, the row-major linear-layer product.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err(
                "matmul_nt",
                format!("{:?} · {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        mm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulNt(a, b), rg, Vec::new()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([n, m], out)?, Op::Transpose(a), rg, Vec::new()))
    }

    fn binary_same(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op_name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg, Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcasts a length-`n` vector over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).numel() != n {
            return Err(shape_err(
                "add_row",
                format!("{:?} + row {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let r = self.value(row).data().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, row), rg, Vec::new()))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape, data).expect("same shape"),
            op,
            rg,
            Vec::new(),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::Numeric {
                op: "ln",
                detail: "non-positive input".into(),
            });
        }
        Ok(self.unary(a, |x| x.ln(), Op::Ln(a)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, Vec::new())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::of(v.numel().max(1) as f64);
        let s: T = v.data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), rg, Vec::new())
    }

    /// Column-wise mean of a matrix, giving a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix(a, "mean_rows")?;
        if m == 0 {
            return Err(shape_err("mean_rows", "zero rows"));
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] += src[i * n + j];
            }
        }
        let inv = T::one() / T::of(m as f64);
        out.iter_mut().for_each(|x| *x *= inv);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([1, n], out)?, Op::MeanRows(a), rg, Vec::new()))
    }

    fn check_finite(&self, a: Var, op: &'static str) -> Result<()> {
        if self.value(a).data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                op,
                detail: "non-finite input".into(),
            });
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_finite(a, "softmax")?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_geometry(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| src[idx(l)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for l in 0..len {
                    let e = (src[idx(l)] - mx).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x: a, axis }, rg, Vec::new()))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_finite(a, "log_softmax")?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("log_softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_geometry(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| src[idx(l)]).fold(T::neg_infinity(), T::max);
                let lse = (0..len).map(|l| (src[idx(l)] - mx).exp()).sum::<T>().ln() + mx;
                for l in 0..len {
                    out[idx(l)] = src[idx(l)] - lse;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LogSoftmax { x: a, axis },
            rg,
            Vec::new(),
        ))
    }

    /// Per-row standardization without affine terms.
    pub fn layernorm(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.cols();
        let rows = v.numel() / n.max(1);
        let eps = T::of(LAYERNORM_EPS);
        let nt = T::of(n as f64);
        let mut out = vec![T::zero(); v.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &v.data()[r * n..(r + 1) * n];
            let mu = x.iter().copied().sum::<T>() / nt;
            let var = x.iter().map(|&e| (e - mu) * (e - mu)).sum::<T>() / nt;
            let is = T::one() / (var + eps).sqrt();
            for (o, &e) in out[r * n..(r + 1) * n].iter_mut().zip(x) {
                *o = (e - mu) * is;
            }
            inv_std.push(is);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::LayerNorm(a),
            rg,
            inv_std,
        )
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.cols();
        let rows = v.numel() / n.max(1);
        let mut out = vec![T::zero(); v.numel()];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &v.data()[r * n..(r + 1) * n];
            let nrm = x.iter().map(|&e| e * e).sum::<T>().sqrt();
            if !(nrm > T::zero()) || !nrm.is_finite() {
                return Err(Error::Numeric {
                    op: "cosine_similarity",
                    detail: format!("row {r} has zero or non-finite norm"),
                });
            }
            for (o, &e) in out[r * n..(r + 1) * n].iter_mut().zip(x) {
                *o = e / nrm;
            }
            norms.push(nrm);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::NormalizeRows(a), rg, norms))
    }

    /// Cosine similarity of two equally shaped vectors, as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let a1 = self.reshape(a, [1, self.value(a).numel()])?;
        let b1 = self.reshape(b, [1, self.value(b).numel()])?;
        let na = self.normalize_rows(a1)?;
        let nb = self.normalize_rows(b1)?;
        let p = self.mul(na, nb)?;
        Ok(self.sum(p))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (m, c) = self.matrix(p, "concat_rows")?;
            if c != n {
                return Err(shape_err("concat_rows", format!("width {c} vs {n}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += m;
            rg |= self.rg(p);
        }
        Ok(self.push(
            Tensor::new([rows, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
            Vec::new(),
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix(a, "slice_rows")?;
        if start > end || end > m {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {m} rows")));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new([end - start, n], data)?,
            Op::SliceRows { x: a, start },
            rg,
            Vec::new(),
        ))
    }

    /// Gathers `a[i, idx[i]]` for each row, giving a length-`m` vector.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(a, "pick")?;
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(shape_err(
                "pick",
                format!("{} indices into {m}×{n}", idx.len()),
            ));
        }
        let src = self.value(a).data();
        let data = idx.iter().enumerate().map(|(i, &j)| src[i * n + j]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new([m], data)?,
            Op::Pick {
                x: a,
                idx: idx.to_vec(),
            },
            rg,
            Vec::new(),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg, Vec::new()))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, &[T::one()])
    }

    /// Backpropagates an explicit output gradient `seed` from `out`.
    pub fn backward_with(&mut self, out: Var, seed: &[T]) -> Result<()> {
        if seed.len() != self.value(out).numel() {
            return Err(shape_err(
                "backward",
                format!("seed len {} vs {:?}", seed.len(), self.shape(out)),
            ));
        }
        let mut tmp: Vec<Option<Vec<T>>> = vec![None; out.0 + 1];
        tmp[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = tmp[i].take() else { continue };
            self.propagate(i, &g, &mut tmp);
            tmp[i] = Some(g);
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        for (i, g) in tmp.into_iter().enumerate() {
            if let Some(g) = g {
                if !self.nodes[i].requires_grad {
                    continue;
                }
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], tmp: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = tmp[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.shape(*a)).unwrap();
                let n = self.value(*b).cols();
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |da| mm_nt_acc(g, val(*b), da, m, n, k));
                acc(*b, &mut |db| mm_tn_acc(val(*a), g, db, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = as_matrix(self.shape(*a)).unwrap();
                let n = self.value(*b).rows();
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                acc(*a, &mut |da| mm_acc(g, val(*b), da, m, n, k));
                acc(*b, &mut |db| mm_tn_acc(g, val(*a), db, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = as_matrix(self.shape(*a)).unwrap();
                acc(*a, &mut |da| {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::AddRow(a, r) => {
                acc(*a, &mut |d| add_into(d, g));
                let n = self.value(*r).numel();
                acc(*r, &mut |d| {
                    for (j, &gv) in g.iter().enumerate() {
                        d[j % n] += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &gv)| *x -= gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv * *c)
            }),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if x[j] > T::zero() {
                            d[j] += g[j];
                        }
                    }
                })
            }
            Op::Tanh(a) => acc(*a, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * (T::one() - y[j] * y[j]);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * y[j];
                }
            }),
            Op::Ln(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / x[j];
                    }
                })
            }
            Op::Abs(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if x[j] != T::zero() {
                            d[j] += g[j] * x[j].signum();
                        }
                    }
                })
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * (x[j] + x[j]);
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = T::of(self.value(*a).numel().max(1) as f64);
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::MeanRows(a) => {
                let (m, n) = as_matrix(self.shape(*a)).unwrap();
                let inv = T::one() / T::of(m as f64);
                acc(*a, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[c] * inv;
                        }
                    }
                })
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_geometry(self.shape(*x), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let dot: T = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                d[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_geometry(self.shape(*x), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let gs: T = (0..len).map(|l| g[idx(l)]).sum();
                            for l in 0..len {
                                d[idx(l)] += g[idx(l)] - y[idx(l)].exp() * gs;
                            }
                        }
                    }
                })
            }
            Op::LayerNorm(a) => {
                let n = self.value(*a).cols();
                let nt = T::of(n as f64);
                let inv_std = &node.aux;
                acc(*a, &mut |d| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let mg = gr.iter().copied().sum::<T>() / nt;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nt;
                        for c in 0..n {
                            d[r * n + c] += is * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                })
            }
            Op::NormalizeRows(a) => {
                let n = self.value(*a).cols();
                let norms = &node.aux;
                acc(*a, &mut |d| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                        for c in 0..n {
                            d[r * n + c] += (gr[c] - yr[c] * dot) / nrm;
                        }
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.value(*x).cols();
                let off = start * n;
                acc(*x, &mut |d| add_into(&mut d[off..off + g.len()], g));
            }
            Op::Pick { x, idx } => {
                let n = self.value(*x).cols();
                acc(*x, &mut |d| {
                    for (i, &j) in idx.iter().enumerate() {
                        d[i * n + j] += g[i];
                    }
                })
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(x, &v)| *x += v);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let a = g.constant(t(&[2, 2], &[1., 0., 0., 0.]));
        let b = g.constant(t(&[2, 2], &[0., 1., 1., 0.]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[0., 1., 0., 0.]);

        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([3, 2]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(p), &[2, 2]);

        let bad = g.constant(Tensor::zeros([2, 2]));
        assert!(matches!(g.matmul(a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = g.constant(t(&[2], &[2f64.ln(), 0.]));
        let s = g.softmax(x, 0).unwrap();
        assert!((g.value(s).data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((g.value(s).data()[1] - 1.0 / 3.0).abs() < 1e-12);

        let x = g.constant(t(&[2], &[f64::NAN, 0.]));
        assert!(matches!(g.softmax(x, 0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0., 1., 0., 3.]));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[2] - 0.5).abs() < 1e-12);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-3., 3.]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0., 3.]);

        let v = g.constant(t(&[3], &[0.3, -1.2, 2.0]));
        let c = g.cosine_similarity(v, v).unwrap();
        assert!((g.value(c).item() - 1.0).abs() < 1e-12);

        let k = g.constant(t(&[1, 4], &[5.; 4]));
        let ln = g.layernorm(k);
        assert!(g.value(ln).data().iter().all(|v| v.abs() < 1e-12));

        let z = g.constant(Tensor::zeros([3]));
        let err = g.cosine_similarity(z, v).unwrap_err();
        assert!(err.to_string().contains("zero"), "{err}");
    }

    #[test]
    fn backward_square_and_constant_softmax_sum() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0f64), true);
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        // accumulate on a second call
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());

        let mut g = Graph::new();
        let x = g.input(t(&[4], &[0.1, -2., 0.7, 1.3]), true);
        let s = g.softmax(x, 0).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::zeros([2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    /// Builds a 3-layer composite touching most ops and returns the loss.
    fn composite(g: &mut Graph<f64>, w: &[Tensor<f64>; 3], x: &Tensor<f64>) -> (Var, [Var; 3]) {
        let ws = [g.param(&w[0]), g.param(&w[1]), g.param(&w[2])];
        let xv = g.constant(x.clone());
        let h = g.matmul_nt(xv, ws[0]).unwrap();
        let h = g.layernorm(h);
        let h = g.tanh(h);
        let h = g.matmul(h, ws[1]).unwrap();
        let h2 = g.normalize_rows(h).unwrap();
        let r = g.relu(h2);
        let top = g.slice_rows(h2, 1, 3).unwrap();
        let both = g.concat_rows(&[r, top]).unwrap();
        let z = g.matmul_nt(both, ws[2]).unwrap();
        let ls = g.log_softmax(z, 1).unwrap();
        let p = g.pick(ls, &[0, 1, 2, 0, 1]).unwrap();
        let sq = g.square(p);
        let ab = g.abs(p);
        let s = g.add(sq, ab).unwrap();
        let m = g.mean(s);
        (m, ws)
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = [
                Tensor::<f64>::randn([6, 4], 0.7, &mut rng).trainable(),
                Tensor::<f64>::randn([6, 5], 0.7, &mut rng).trainable(),
                Tensor::<f64>::randn([3, 5], 0.7, &mut rng).trainable(),
            ];
            let x = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
            let mut g = Graph::new();
            let (loss, vars) = composite(&mut g, &w, &x);
            g.backward(loss).unwrap();
            let h = 1e-3;
            for (k, v) in vars.iter().enumerate() {
                let analytic = g.grad(*v).unwrap().to_vec();
                let mut fd = vec![0.0; analytic.len()];
                for j in 0..analytic.len() {
                    let mut wp = w.clone();
                    wp[k].data_mut()[j] += h;
                    let mut gp = Graph::new();
                    let (lp, _) = composite(&mut gp, &wp, &x);
                    let mut wm = w.clone();
                    wm[k].data_mut()[j] -= h;
                    let mut gm = Graph::new();
                    let (lm, _) = composite(&mut gm, &wm, &x);
                    fd[j] = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
                }
                let num: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                assert!(num / den <= 1e-4, "seed {seed} w{k}: rel err {}", num / den);
            }
        }
    }
}
