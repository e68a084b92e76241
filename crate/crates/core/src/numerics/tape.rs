//! Reverse-mode automatic differentiation over batch matrices.
//!
//! Every operation appends a node holding its output value. Node indices are
//! therefore already a topological order, and the backward pass is a single
//! reverse sweep that visits each node at most once. Leaves borrow their
//! values where possible so binding a network's weights does not copy them.

use std::borrow::Cow;

use crate::error::{CtpError, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    ScaleRows(Var, Vec<S>),
    Silu(Var),
    Sigmoid(Var),
    LogClamped(Var, S, S),
    Sum(Var),
    ConcatCols(Vec<Var>),
    StopGradient,
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Computation tape recording primitive operations and their outputs.
pub struct Tape<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
}

impl<S: Scalar> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn silu<S: Scalar>(x: S) -> S {
    x / (S::one() + (-x).exp())
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// `x + b` with `b` broadcast over rows, in place.
pub(crate) fn add_row_inplace<S: Scalar>(x: &mut Tensor<S>, b: &[S]) {
    let cols = x.cols();
    for row in x.data_mut().chunks_mut(cols) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v = *v + bb;
        }
    }
}

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<S>>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, value: &'a Tensor<S>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Trainable leaf owning its value.
    pub fn param_owned(&mut self, value: Tensor<S>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<S>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, ctx: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(CtpError::dim(ctx, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::numerics::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    /// Adds a `[1, n]` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(CtpError::dim("add_row bias width", xv.cols(), bv.len()));
        }
        let mut out = xv.clone();
        add_row_inplace(&mut out, bv.data());
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::AddRow(x, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Scale(x, c), rg)
    }

    /// Multiplies row `r` of `x` by the constant `coeffs[r]`.
    pub fn scale_rows(&mut self, x: Var, coeffs: Vec<S>) -> Result<Var> {
        let xv = self.value(x);
        if coeffs.len() != xv.rows() {
            return Err(CtpError::dim("scale_rows", xv.rows(), coeffs.len()));
        }
        let mut out = xv.clone();
        let cols = out.cols();
        for (row, &c) in out.data_mut().chunks_mut(cols).zip(&coeffs) {
            row.iter_mut().for_each(|v| *v = *v * c);
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::ScaleRows(x, coeffs), rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Sigmoid(x), rg)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, lo: S, hi: S) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi).ln());
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::LogClamped(x, lo, hi), rg)
    }

    /// Sum of all entries as a `[1, 1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Sum(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| CtpError::contract("concat_cols of nothing"))?;
        let mut width = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(CtpError::dim("concat_cols rows", rows, v.rows()));
            }
            width += v.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, width, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Same value as `x`, but gradients never flow back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(Cow::Owned(out), Op::StopGradient, false)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(CtpError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::StopGradient => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.rg(*a) {
                        let mut da = Tensor::zeros(av.shape());
                        S::gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            n as isize,
                            1,
                            bv.data(),
                            1,
                            n as isize,
                            da.data_mut(),
                        );
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = Tensor::zeros(bv.shape());
                        S::gemm(
                            k,
                            m,
                            n,
                            av.data(),
                            1,
                            k as isize,
                            g.data(),
                            n as isize,
                            1,
                            db.data_mut(),
                        );
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddRow(x, b) => {
                    if self.rg(*b) {
                        let cols = g.cols();
                        let mut db = vec![S::zero(); cols];
                        for row in g.data().chunks(cols) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc = *acc + v;
                            }
                        }
                        let shape = self.value(*b).shape().to_vec();
                        accumulate(&mut grads, *b, Tensor::new(shape, db)?);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let da = g.zip_map(self.value(*b), |gg, y| gg * y)?;
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let db = g.zip_map(self.value(*a), |gg, x| gg * x)?;
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.map(|v| v * c));
                }
                Op::ScaleRows(x, coeffs) => {
                    let mut dx = g;
                    let cols = dx.cols();
                    for (row, &c) in dx.data_mut().chunks_mut(cols).zip(coeffs) {
                        row.iter_mut().for_each(|v| *v = *v * c);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Silu(x) => {
                    let dx = g.zip_map(self.value(*x), |gg, xv| {
                        let s = sigmoid(xv);
                        gg * s * (S::one() + xv * (S::one() - s))
                    })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = g.zip_map(&node.value, |gg, s| gg * s * (S::one() - s))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogClamped(x, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let dx = g.zip_map(self.value(*x), |gg, xv| {
                        if xv > lo && xv < hi {
                            gg / xv
                        } else {
                            S::zero()
                        }
                    })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let gg = g.data()[0];
                    let dx = Tensor::filled(self.value(*x).shape(), gg);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            let mut data = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                data.extend_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            let shape = self.value(p).shape().to_vec();
                            accumulate(&mut grads, p, Tensor::new(shape, data)?);
                        }
                        offset += w;
                    }
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &d) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + d;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a leaf; exactly zero when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn wrt_all(&self, vars: &[Var]) -> Vec<Tensor<S>> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn square_derivative() {
        let x = Tensor::scalar(3.0f64);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let y = tape.mul(xv, xv).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(xv).item().unwrap(), 6.0);
    }

    #[test]
    fn unused_parameter_has_exact_zero_gradient() {
        let x = Tensor::scalar(2.0f64);
        let p = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let pv = tape.param(&p);
        let y = tape.scale(xv, 5.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(pv).data(), &[0.0; 4]);
        assert_eq!(g.wrt(xv).item().unwrap(), 5.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        assert!(matches!(tape.backward(xv), Err(CtpError::Contract(_))));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        for x0 in [-2.3, -0.4, 0.0, 0.7, 3.1] {
            let f = |x: f64| {
                let t = Tensor::scalar(x);
                let mut tape = Tape::new();
                let v = tape.param(&t);
                let a = tape.silu(v);
                let b = tape.sigmoid(v);
                let c = tape.mul(a, b).unwrap();
                let d = tape.log_clamped(b, 1e-7, 1.0 - 1e-7);
                let e = tape.sub(c, d).unwrap();
                let s = tape.sum(e);
                tape.value(s).item().unwrap()
            };
            let t = Tensor::scalar(x0);
            let mut tape = Tape::new();
            let v = tape.param(&t);
            let a = tape.silu(v);
            let b = tape.sigmoid(v);
            let c = tape.mul(a, b).unwrap();
            let d = tape.log_clamped(b, 1e-7, 1.0 - 1e-7);
            let e = tape.sub(c, d).unwrap();
            let s = tape.sum(e);
            let g = tape.backward(s).unwrap().wrt(v).item().unwrap();
            assert!((g - fd(f, x0)).abs() < 1e-7, "x={x0}: {g} vs {}", fd(f, x0));
        }
    }

    #[test]
    fn matmul_concat_scale_rows_gradients() {
        let a = Tensor::matrix(2, 3, vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.7]).unwrap();
        let b = Tensor::matrix(4, 1, vec![0.9, -0.2, 0.4, 1.5]).unwrap();
        let loss = |a: &Tensor<f64>, b: &Tensor<f64>| -> (f64, Vec<Tensor<f64>>) {
            let mut tape = Tape::new();
            let av = tape.param(a);
            let bv = tape.param(b);
            let c = tape.constant(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap());
            let cat = tape.concat_cols(&[av, c]).unwrap();
            let y = tape.matmul(cat, bv).unwrap();
            let y = tape.scale_rows(y, vec![2.0, -0.5]).unwrap();
            let y2 = tape.mul(y, y).unwrap();
            let s = tape.sum(y2);
            let g = tape.backward(s).unwrap();
            (tape.value(s).item().unwrap(), vec![g.wrt(av), g.wrt(bv)])
        };
        let (_, grads) = loss(&a, &b);
        let h = 1e-6;
        for (which, base) in [&a, &b].into_iter().enumerate() {
            for i in 0..base.len() {
                let mut p = base.clone();
                p.data_mut()[i] += h;
                let mut m = base.clone();
                m.data_mut()[i] -= h;
                let (fp, fm) = if which == 0 {
                    (loss(&p, &b).0, loss(&m, &b).0)
                } else {
                    (loss(&a, &p).0, loss(&a, &m).0)
                };
                let num = (fp - fm) / (2.0 * h);
                let an = grads[which].data()[i];
                assert!((num - an).abs() < 1e-6 * (1.0 + an.abs()), "{num} vs {an}");
            }
        }
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let x = Tensor::scalar(1.5f64);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let s = tape.stop_gradient(v);
        let y = tape.mul(v, s).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(v).item().unwrap(), 1.5);
    }
}
