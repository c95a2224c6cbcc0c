//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] owns every intermediate value. Operations append a node whose
//! inputs are earlier nodes, so the node vector is already in topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to [`Tape::add_bias`] (a row vector added to every
//! row). All other binary ops need identical dims.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default additive fill used to knock out masked logits.
pub const MASK_FILL: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Concat(Vec<Var>, Axis),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var, Option<Axis>),
    Mean(Var, Option<Axis>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.dims[var.0].clone(), g.clone()).expect("grad dims"))
    }

    /// Gradient, or zeros of the node's dims when nothing flowed into it.
    pub fn get_or_zero(&self, var: Var) -> Tensor<T> {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.dims[var.0]))
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.dims()
    }

    fn shape2(&self, var: Var) -> Result<(usize, usize)> {
        self.nodes[var.0].value.shape2()
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return shape_err(op, self.dims(a), self.dims(b));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.dims().to_vec(), data).expect("same dims");
        self.push(value, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a)?;
        let (k2, n) = self.shape2(b)?;
        if k != k2 {
            return shape_err("matmul", self.dims(a), self.dims(b));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape2(x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape2(x)?;
        if self.value(bias).len() != n || self.value(bias).shape2()?.0 != 1 {
            return shape_err("add_bias", self.dims(x), self.dims(bias));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o = *o + bj;
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of nothing".into()))?;
        let (m0, n0) = self.shape2(first)?;
        let mut shapes = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m, n) = self.shape2(p)?;
            let ok = match axis {
                Axis::Rows => n == n0,
                Axis::Cols => m == m0,
            };
            if !ok {
                return shape_err("concat", self.dims(first), self.dims(p));
            }
            shapes.push((m, n));
        }
        let value = match axis {
            Axis::Rows => {
                let rows: usize = shapes.iter().map(|s| s.0).sum();
                let mut out = Vec::with_capacity(rows * n0);
                for &p in parts {
                    out.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(rows, n0, out)?
            }
            Axis::Cols => {
                let cols: usize = shapes.iter().map(|s| s.1).sum();
                let mut out = Vec::with_capacity(m0 * cols);
                for i in 0..m0 {
                    for &p in parts {
                        out.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::matrix(m0, cols, out)?
            }
        };
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape2(x)?;
        if start >= end || end > n {
            return shape_err("slice_cols", self.dims(x), &[start, end]);
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let value = Tensor::matrix(m, w, out)?;
        Ok(self.push(value, Op::SliceCols(x, start), &[x]))
    }

    /// Rows picked by index; repeats allowed, gradient is scatter-added.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.shape2(x)?;
        if indices.is_empty() {
            return Err(Error::InvalidTensor("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return shape_err("gather_rows", self.dims(x), &[bad]);
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(src.row(i));
        }
        let value = Tensor::matrix(indices.len(), n, out)?;
        Ok(self.push(value, Op::GatherRows(x, indices.to_vec()), &[x]))
    }

    fn reduce(&mut self, x: Var, axis: Option<Axis>, mean: bool) -> Result<Var> {
        let (m, n) = self.shape2(x)?;
        let src = self.value(x).data();
        let value = match axis {
            None => {
                let s: T = src.iter().copied().sum();
                let s = if mean { s / T::lit((m * n) as f64) } else { s };
                Tensor::scalar(s)
            }
            Some(Axis::Rows) => {
                let mut out = vec![T::zero(); n];
                for row in src.chunks(n) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                if mean {
                    let d = T::lit(m as f64);
                    out.iter_mut().for_each(|o| *o = *o / d);
                }
                Tensor::matrix(1, n, out)?
            }
            Some(Axis::Cols) => {
                let d = T::lit(n as f64);
                let out = src
                    .chunks(n)
                    .map(|row| {
                        let s: T = row.iter().copied().sum();
                        if mean {
                            s / d
                        } else {
                            s
                        }
                    })
                    .collect();
                Tensor::matrix(m, 1, out)?
            }
        };
        let op = if mean {
            Op::Mean(x, axis)
        } else {
            Op::Sum(x, axis)
        };
        Ok(self.push(value, op, &[x]))
    }

    /// Sum over everything (`None`), down the rows, or across the columns.
    pub fn sum(&mut self, x: Var, axis: Option<Axis>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<Axis>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape2(x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Softmax over entries where `mask` is 1; the others get `neg_fill`
    /// added to their logit first, which drives their probability to 0.
    pub fn masked_row_softmax(&mut self, x: Var, mask: &Tensor<T>, neg_fill: T) -> Result<Var> {
        let filled = self.fill_masked(x, mask, neg_fill)?;
        let (m, n) = self.shape2(x)?;
        let mut out = filled;
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Log-probabilities of [`Tape::masked_row_softmax`], computed stably.
    pub fn masked_log_softmax(&mut self, x: Var, mask: &Tensor<T>, neg_fill: T) -> Result<Var> {
        let filled = self.fill_masked(x, mask, neg_fill)?;
        let (m, n) = self.shape2(x)?;
        let mut out = filled;
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    fn fill_masked(&self, x: Var, mask: &Tensor<T>, neg_fill: T) -> Result<Vec<T>> {
        if mask.dims() != self.dims(x) {
            return shape_err("masked_softmax", self.dims(x), mask.dims());
        }
        let (_, n) = self.shape2(x)?;
        let mut out = self.value(x).data().to_vec();
        for (r, (row, mrow)) in out.chunks_mut(n).zip(mask.data().chunks(n)).enumerate() {
            let mut any = false;
            for (v, &mk) in row.iter_mut().zip(mrow) {
                if mk == T::one() {
                    any = true;
                } else if mk == T::zero() {
                    *v = *v + neg_fill;
                } else {
                    return Err(Error::InvalidTensor(format!(
                        "mask entries must be 0 or 1, got {mk}"
                    )));
                }
            }
            if !any {
                return Err(Error::AllMasked { row: r });
            }
        }
        Ok(out)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NotScalar(loss_value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let dims = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.dims().to_vec())
            .collect();
        Ok(Gradients { grads, dims })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).shape2().unwrap();
                let n = self.value(*b).shape2().unwrap().1;
                if self.requires_grad(*a) {
                    let acc = self.slot(*a, grads);
                    // dA += dC . B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (n as isize, 1),
                        self.value(*b).data(),
                        (1, n as isize),
                        T::one(),
                        acc,
                    );
                }
                if self.requires_grad(*b) {
                    let a_data = self.value(*a).data();
                    let acc = self.slot(*b, grads);
                    // dB += A^T . dC
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        a_data,
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::one(),
                        acc,
                    );
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).shape2().unwrap();
                let acc = self.slot(*x, grads);
                for i in 0..m {
                    for j in 0..n {
                        acc[i * n + j] = acc[i * n + j] + g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, grads, g, T::one());
                self.accumulate(*b, grads, g, T::one());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, grads, g, T::one());
                self.accumulate(*b, grads, g, -T::one());
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let vb = self.value(*b).data();
                    let acc = self.slot(*a, grads);
                    for ((o, &gi), &bi) in acc.iter_mut().zip(g).zip(vb) {
                        *o = *o + gi * bi;
                    }
                }
                if self.requires_grad(*b) {
                    let va = self.value(*a).data();
                    let acc = self.slot(*b, grads);
                    for ((o, &gi), &ai) in acc.iter_mut().zip(g).zip(va) {
                        *o = *o + gi * ai;
                    }
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(*x, grads, g, T::one());
                if self.requires_grad(*b) {
                    let n = self.value(*b).len();
                    let acc = self.slot(*b, grads);
                    for row in g.chunks(n) {
                        for (o, &gi) in acc.iter_mut().zip(row) {
                            *o = *o + gi;
                        }
                    }
                }
            }
            Op::Scale(x, c) => self.accumulate(*x, grads, g, *c),
            Op::AddScalar(x) => self.accumulate(*x, grads, g, T::one()),
            Op::Concat(parts, axis) => {
                let (m, total) = node.value.shape2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let (pm, pn) = self.value(p).shape2().unwrap();
                    if self.requires_grad(p) {
                        let acc = self.slot(p, grads);
                        match axis {
                            Axis::Rows => {
                                let src = &g[offset * total..(offset + pm) * total];
                                for (o, &gi) in acc.iter_mut().zip(src) {
                                    *o = *o + gi;
                                }
                            }
                            Axis::Cols => {
                                for i in 0..m {
                                    let src = &g[i * total + offset..i * total + offset + pn];
                                    for (o, &gi) in acc[i * pn..(i + 1) * pn].iter_mut().zip(src) {
                                        *o = *o + gi;
                                    }
                                }
                            }
                        }
                    }
                    offset += match axis {
                        Axis::Rows => pm,
                        Axis::Cols => pn,
                    };
                }
            }
            Op::SliceCols(x, start) => {
                let (m, w) = node.value.shape2().unwrap();
                let n = self.value(*x).shape2().unwrap().1;
                let acc = self.slot(*x, grads);
                for i in 0..m {
                    for j in 0..w {
                        let o = &mut acc[i * n + start + j];
                        *o = *o + g[i * w + j];
                    }
                }
            }
            Op::GatherRows(x, indices) => {
                let n = self.value(*x).shape2().unwrap().1;
                let acc = self.slot(*x, grads);
                for (r, &src) in indices.iter().enumerate() {
                    for j in 0..n {
                        let o = &mut acc[src * n + j];
                        *o = *o + g[r * n + j];
                    }
                }
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let (m, n) = self.value(*x).shape2().unwrap();
                let is_mean = matches!(node.op, Op::Mean(..));
                let denom = match (is_mean, axis) {
                    (false, _) => T::one(),
                    (true, None) => T::lit((m * n) as f64),
                    (true, Some(Axis::Rows)) => T::lit(m as f64),
                    (true, Some(Axis::Cols)) => T::lit(n as f64),
                };
                let acc = self.slot(*x, grads);
                for i in 0..m {
                    for j in 0..n {
                        let gi = match axis {
                            None => g[0],
                            Some(Axis::Rows) => g[j],
                            Some(Axis::Cols) => g[i],
                        };
                        let o = &mut acc[i * n + j];
                        *o = *o + gi / denom;
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                let acc = self.slot(*x, grads);
                for ((o, &gi), &xi) in acc.iter_mut().zip(g).zip(vx) {
                    if xi > T::zero() {
                        *o = *o + gi;
                    }
                }
            }
            Op::Tanh(x) => self.accumulate_with_out(*x, grads, g, out, |y| T::one() - y * y),
            Op::Sigmoid(x) => self.accumulate_with_out(*x, grads, g, out, |y| y * (T::one() - y)),
            Op::Exp(x) => self.accumulate_with_out(*x, grads, g, out, |y| y),
            Op::Log(x) => {
                let vx = self.value(*x).data();
                let acc = self.slot(*x, grads);
                for ((o, &gi), &xi) in acc.iter_mut().zip(g).zip(vx) {
                    *o = *o + gi / xi;
                }
            }
            Op::Softmax(x) => {
                let n = node.value.shape2().unwrap().1;
                let acc = self.slot(*x, grads);
                for ((arow, grow), prow) in acc.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: T = grow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &pi) in arow.iter_mut().zip(grow).zip(prow) {
                        *o = *o + pi * (gi - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = node.value.shape2().unwrap().1;
                let acc = self.slot(*x, grads);
                for ((arow, grow), lrow) in acc.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let total: T = grow.iter().copied().sum();
                    for ((o, &gi), &li) in arow.iter_mut().zip(grow).zip(lrow) {
                        *o = *o + gi - li.exp() * total;
                    }
                }
            }
        }
    }

    fn slot<'g>(&self, var: Var, grads: &'g mut [Option<Vec<T>>]) -> &'g mut [T] {
        let len = self.value(var).len();
        grads[var.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn accumulate(
        &self,
        var: Var,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        factor: T,
    ) {
        if !self.requires_grad(var) {
            return;
        }
        let acc = self.slot(var, grads);
        for (o, &gi) in acc.iter_mut().zip(g) {
            *o = *o + gi * factor;
        }
    }

    fn accumulate_with_out(
        &self,
        var: Var,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        out: &[T],
        local: impl Fn(T) -> T,
    ) {
        if !self.requires_grad(var) {
            return;
        }
        let acc = self.slot(var, grads);
        for ((o, &gi), &y) in acc.iter_mut().zip(g).zip(out) {
            *o = *o + gi * local(y);
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[0.0]));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data()[0], 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data()[0], 0.25);
    }

    #[test]
    fn uniform_softmax() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.row_softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_two_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 5.0]));
        let mask = t(&[1, 3], &[1.0, 1.0, 0.0]);
        let y = tape.masked_row_softmax(x, &mask, MASK_FILL).unwrap();
        let p = tape.value(y).data();
        assert!((p[0] - 0.2689).abs() < 1e-4);
        assert!((p[1] - 0.7311).abs() < 1e-4);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn all_masked_row_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mask = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let err = tape.masked_row_softmax(x, &mask, MASK_FILL).unwrap_err();
        assert!(matches!(err, Error::AllMasked { row: 1 }));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.backward(a), Err(Error::NotScalar(_))));
    }

    #[test]
    fn sum_of_doubled_input_has_gradient_two() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[0.1, -2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.scale(x, 2.0);
        let loss = tape.sum(y, None).unwrap();
        let g = tape.backward(loss).unwrap().get(x).unwrap();
        assert!(g.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn masked_entries_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[0.3, -1.0, 2.0, 0.5, 0.1, -0.7]));
        let mask = t(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let p = tape.masked_row_softmax(x, &mask, MASK_FILL).unwrap();
        let w = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]));
        let y = tape.mul(p, w).unwrap();
        let loss = tape.sum(y, None).unwrap();
        let g = tape.backward(loss).unwrap().get(x).unwrap();
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[3], 0.0);
        assert!(g.data()[0] != 0.0);
    }
}
