//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node in an
//! arena; [`Var`] is an index into that arena. Nodes are pushed in evaluation
//! order, so the arena is already a topological order and [`Tape::backward`]
//! is a single reverse sweep.
//!
//! Lifecycle: build a fresh tape per forward pass, call `backward` once (or
//! several times, the tape is not consumed), read gradients out of the
//! returned [`Gradients`], then drop the tape. Parameters live outside the
//! tape; callers copy them in with [`Tape::param`] and accumulate the
//! gradients back themselves.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Debug, Clone, Copy)]
enum Broadcast {
    /// Same number of elements; output takes the left shape.
    Same,
    /// Right operand holds a single value.
    Scalar,
    /// Left is `[rows, cols]`, right holds `cols` values applied to every row.
    Row { cols: usize },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    Pow(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    Sum(Var),
    MeanRows(Var),
    Norm(Var),
    Index(Var, usize),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of the operations in one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` requires grad and
    /// is reachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
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

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, rg, op)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape_vec(),
            rhs: self.value(b).shape_vec(),
        }
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() == tb.numel() {
            Ok(Broadcast::Same)
        } else if tb.numel() == 1 {
            Ok(Broadcast::Scalar)
        } else if ta.shape().len() == 2 && tb.numel() == ta.cols() {
            Ok(Broadcast::Row { cols: ta.cols() })
        } else {
            Err(self.shape_err(op, a, b))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let bc = self.broadcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let rhs = tb.data();
        let data: Vec<f64> = match bc {
            Broadcast::Same => ta.data().iter().zip(rhs).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => ta.data().iter().map(|&x| f(x, rhs[0])).collect(),
            Broadcast::Row { cols } => ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, rhs[i % cols]))
                .collect(),
        };
        let out = Tensor::new(ta.shape_vec(), data)?;
        Ok(self.push_op(out, &[a, b], make(a, b, bc)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        self.push_op(out, &[a], op)
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = tensor::matmul(ta.data(), tb.data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push_op(out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Pow(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.pow(a, 2.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    /// `max(x, floor)`; the gradient is passed through only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Row-wise softmax of a `[batch, classes]` matrix, stabilized by
    /// subtracting each row's maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidValue("NaN in softmax input".into()));
        }
        let out = Tensor::new(ta.shape_vec(), softmax_rows(ta))?;
        Ok(self.push_op(out, &[a], Op::Softmax(a)))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push_op(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    /// Mean of every element, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means of `[rows, cols]`, shape `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || ta.rows() == 0 {
            return Err(Error::Shape {
                op: "mean_rows",
                lhs: ta.shape_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut m = vec![0.0; c];
        for i in 0..r {
            for (acc, &v) in m.iter_mut().zip(ta.row(i)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= r as f64);
        let out = Tensor::new(vec![1, c], m)?;
        Ok(self.push_op(out, &[a], Op::MeanRows(a)))
    }

    /// Euclidean norm of all elements. The gradient at the origin is taken
    /// to be zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let n = self.value(a).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push_op(Tensor::scalar(n), &[a], Op::Norm(a))
    }

    /// Element `i` of a flattened tensor, as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let ta = self.value(a);
        if i >= ta.numel() {
            return Err(Error::Contract(format!(
                "index {i} out of range for {:?}",
                ta.shape()
            )));
        }
        let v = ta.data()[i];
        Ok(self.push_op(Tensor::scalar(v), &[a], Op::Index(a, i)))
    }

    /// Picks `a[i, cols[i]]` from each row, giving a vector of length `rows`.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || ta.rows() != cols.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: ta.shape_vec(),
                rhs: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= ta.cols()) {
            return Err(Error::Contract(format!(
                "gather column {bad} out of range for {} columns",
                ta.cols()
            )));
        }
        let data = cols.iter().enumerate().map(|(i, &c)| ta.get(i, c)).collect();
        let out = Tensor::vector(data);
        Ok(self.push_op(out, &[a], Op::Gather(a, cols.to_vec())))
    }

    /// Backpropagates from a scalar `loss`.
    ///
    /// Gradients of a value that feeds several operations are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lt.shape_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        // Only report gradients for values that actually require them.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    let da = tensor::matmul_nt(gd, tb.data(), m, n, k);
                    self.accumulate(grads, *a, da)?;
                }
                if self.requires_grad(*b) {
                    let db = tensor::matmul_tn(ta.data(), gd, m, k, n);
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b, bc) => {
                self.accumulate(grads, *a, gd.to_vec())?;
                self.accumulate_broadcast(grads, *b, *bc, gd.iter().copied())?;
            }
            Op::Sub(a, b, bc) => {
                self.accumulate(grads, *a, gd.to_vec())?;
                self.accumulate_broadcast(grads, *b, *bc, gd.iter().map(|v| -v))?;
            }
            Op::Mul(a, b, bc) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let bd = tb.data();
                if self.requires_grad(*a) {
                    let da = gd
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * bd[broadcast_index(*bc, i)])
                        .collect();
                    self.accumulate(grads, *a, da)?;
                }
                let ad = ta.data();
                self.accumulate_broadcast(
                    grads,
                    *b,
                    *bc,
                    gd.iter().zip(ad).map(|(gv, av)| gv * av),
                )?;
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|v| v * c).collect())?;
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, gd.to_vec())?;
            }
            Op::Pow(a, p) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| gv * p * xv.powf(p - 1.0))
                    .collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::Ln(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(gv, xv)| gv / xv).collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > *floor { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; gd.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0]; n])?;
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let d = (0..r * c).map(|i| gd[i % c] / r as f64).collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::Norm(a) => {
                let n = node.value.item();
                let x = self.value(*a).data();
                let d = if n > 0.0 {
                    x.iter().map(|xv| gd[0] * xv / n).collect()
                } else {
                    vec![0.0; x.len()]
                };
                self.accumulate(grads, *a, d)?;
            }
            Op::Index(a, i) => {
                let mut d = vec![0.0; self.value(*a).numel()];
                d[*i] = gd[0];
                self.accumulate(grads, *a, d)?;
            }
            Op::Gather(a, cols) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut d = vec![0.0; ta.numel()];
                for (i, &col) in cols.iter().enumerate() {
                    d[i * c + col] = gd[i];
                }
                self.accumulate(grads, *a, d)?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Vec<f64>) -> Result<()> {
        if !self.requires_grad(var) {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.value(var).shape_vec(), delta)?);
            }
        }
        Ok(())
    }

    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Tensor>],
        var: Var,
        bc: Broadcast,
        contributions: impl Iterator<Item = f64>,
    ) -> Result<()> {
        if !self.requires_grad(var) {
            return Ok(());
        }
        let n = self.value(var).numel();
        let mut d = vec![0.0; n];
        for (i, v) in contributions.enumerate() {
            d[broadcast_index(bc, i)] += v;
        }
        self.accumulate(grads, var, d)
    }
}

fn broadcast_index(bc: Broadcast, i: usize) -> usize {
    match bc {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Row { cols } => i % cols,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stabilized row-wise softmax of a matrix, outside of any tape.
pub fn softmax_rows(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut out = Vec::with_capacity(t.numel());
    for i in 0..t.rows() {
        let row = t.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - max).exp();
            z += e;
            out.push(e);
        }
        out[start..start + c].iter_mut().for_each(|v| *v /= z);
    }
    out
}
