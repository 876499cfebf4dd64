use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// How the right operand of a binary op is broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `[1 x d]` (or `[d]`) repeated over every row of `[n x d]`.
    Row,
    /// One element applied everywhere.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Binary, usize, usize, Bcast),
    Scale(usize, f64),
    SoftplusShifted(usize),
    Relu(usize),
    Pow(usize, f64),
    Concat(Vec<usize>),
    StackRows(Vec<usize>),
    Gather(usize, Arc<[usize]>),
    SegmentSum(usize, Arc<[usize]>),
    SumAll(usize),
    SumRows(usize),
    Reshape(usize),
    CrossEntropy(usize, Arc<[usize]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::SoftplusShifted(_) => "softplus_shifted",
            Op::Relu(_) => "relu",
            Op::Pow(..) => "pow",
            Op::Concat(_) => "concat",
            Op::StackRows(_) => "stack_rows",
            Op::Gather(..) => "gather_rows",
            Op::SegmentSum(..) => "segment_sum",
            Op::SumAll(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::Reshape(_) => "reshape",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Define-by-run record of every primitive executed during a forward pass.
///
/// Nodes are appended in execution order, so the tape is topologically
/// sorted by construction and a single reverse sweep visits each op once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// ln(1 + e^x) - ln 2, stable for large |x|.
pub fn softplus_shifted(x: f64) -> f64 {
    let sp = if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    };
    sp - std::f64::consts::LN_2
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Gradients are tracked iff `value.requires_grad()`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let needs_grad = value.requires_grad();
        self.push_unchecked(value, Op::Leaf, needs_grad, None)
    }

    pub fn constant(&self, mut value: Tensor) -> Var<'_> {
        value.set_requires_grad(false);
        self.leaf(value)
    }

    pub fn param(&self, value: Tensor, id: ParamId) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true, Some(id))
    }

    fn push_unchecked(&self, value: Tensor, op: Op, needs_grad: bool, param: Option<ParamId>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value (shape {:?})",
                op.name(),
                value.shape()
            )));
        }
        let needs_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].needs_grad)
        };
        Ok(self.push_unchecked(value, op, needs_grad, None))
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    fn check_same(&self, vars: &[Var<'_>]) {
        for v in vars {
            assert!(std::ptr::eq(v.tape, self), "variables from different tapes");
        }
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.check_same(parts);
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            Tensor::concat_cols(&refs)?
        };
        self.push(value, Op::Concat(ids.clone()), &ids)
    }

    /// Stacks matrices with equal column counts along the first axis.
    pub fn stack_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.check_same(parts);
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let cols = ids.first().map_or(0, |&i| nodes[i].value.cols());
            let mut data = Vec::new();
            let mut rows = 0;
            for &i in &ids {
                let t = &nodes[i].value;
                t.as_matrix("stack_rows")?;
                if t.cols() != cols {
                    return Err(Error::dim(format!(
                        "stack_rows needs equal column counts, got {cols} and {}",
                        t.cols()
                    )));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new([rows, cols], data)?
        };
        self.push(value, Op::StackRows(ids.clone()), &ids)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_same(&[loss]);
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let seed_shape = nodes[loss.id].value.shape().to_vec();
        grads[loss.id] = Some(Tensor::full(seed_shape, 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut leaves = Vec::new();
        let mut params = Vec::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                if let Some(p) = node.param {
                    params.push((p, leaves.len()));
                }
                leaves.push((id, g));
            }
        }
        Ok(Gradients { leaves, params })
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    f(t.data_mut());
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    let wants = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if wants(*a) {
                accumulate(&mut grads[*a], av.shape(), |ga| gemm_nt(gd, bv.data(), ga, m, n, k));
            }
            if wants(*b) {
                accumulate(&mut grads[*b], bv.shape(), |gb| gemm_tn(av.data(), gd, gb, k, m, n));
            }
        }
        Op::Binary(kind, a, b, bc) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let cols = bv.numel();
            let rhs_index = |i: usize| match bc {
                Bcast::Same => i,
                Bcast::Row => i % cols,
                Bcast::Scalar => 0,
            };
            if wants(*a) {
                accumulate(&mut grads[*a], av.shape(), |ga| match kind {
                    Binary::Add | Binary::Sub => {
                        for (x, y) in ga.iter_mut().zip(gd) {
                            *x += y;
                        }
                    }
                    Binary::Mul => {
                        let bd = bv.data();
                        for (i, x) in ga.iter_mut().enumerate() {
                            *x += gd[i] * bd[rhs_index(i)];
                        }
                    }
                });
            }
            if wants(*b) {
                let sign = if *kind == Binary::Sub { -1.0 } else { 1.0 };
                accumulate(&mut grads[*b], bv.shape(), |gb| {
                    let ad = av.data();
                    for (i, &gi) in gd.iter().enumerate() {
                        let v = match kind {
                            Binary::Add | Binary::Sub => sign * gi,
                            Binary::Mul => gi * ad[i],
                        };
                        gb[rhs_index(i)] += v;
                    }
                });
            }
        }
        Op::Scale(a, c) => {
            accumulate(&mut grads[*a], nodes[*a].value.shape(), |ga| {
                for (x, y) in ga.iter_mut().zip(gd) {
                    *x += c * y;
                }
            });
        }
        Op::SoftplusShifted(a) => {
            let av = &nodes[*a].value;
            accumulate(&mut grads[*a], av.shape(), |ga| {
                for ((x, y), &v) in ga.iter_mut().zip(gd).zip(av.data()) {
                    *x += y * sigmoid(v);
                }
            });
        }
        Op::Relu(a) => {
            let av = &nodes[*a].value;
            accumulate(&mut grads[*a], av.shape(), |ga| {
                for ((x, y), &v) in ga.iter_mut().zip(gd).zip(av.data()) {
                    if v > 0.0 {
                        *x += y;
                    }
                }
            });
        }
        Op::Pow(a, p) => {
            let av = &nodes[*a].value;
            accumulate(&mut grads[*a], av.shape(), |ga| {
                for ((x, y), &v) in ga.iter_mut().zip(gd).zip(av.data()) {
                    *x += y * p * v.powf(p - 1.0);
                }
            });
        }
        Op::Concat(parts) => {
            let total = g.cols();
            let rows = g.rows();
            let mut offset = 0;
            for &p in parts {
                let pv = &nodes[p].value;
                let w = pv.cols();
                if wants(p) {
                    accumulate(&mut grads[p], pv.shape(), |gp| {
                        for r in 0..rows {
                            let src = &gd[r * total + offset..r * total + offset + w];
                            for (x, y) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                }
                offset += w;
            }
        }
        Op::StackRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let pv = &nodes[p].value;
                let n = pv.numel();
                if wants(p) {
                    accumulate(&mut grads[p], pv.shape(), |gp| {
                        for (x, y) in gp.iter_mut().zip(&gd[offset..offset + n]) {
                            *x += y;
                        }
                    });
                }
                offset += n;
            }
        }
        Op::Gather(a, ids) => {
            let av = &nodes[*a].value;
            let w = av.cols();
            accumulate(&mut grads[*a], av.shape(), |ga| {
                for (r, &src) in ids.iter().enumerate() {
                    for (x, y) in ga[src * w..(src + 1) * w].iter_mut().zip(&gd[r * w..(r + 1) * w]) {
                        *x += y;
                    }
                }
            });
        }
        Op::SegmentSum(a, ids) => {
            let av = &nodes[*a].value;
            let w = av.cols();
            accumulate(&mut grads[*a], av.shape(), |ga| {
                for (r, &seg) in ids.iter().enumerate() {
                    for (x, y) in ga[r * w..(r + 1) * w].iter_mut().zip(&gd[seg * w..(seg + 1) * w]) {
                        *x += y;
                    }
                }
            });
        }
        Op::SumAll(a) => {
            let s = gd[0];
            accumulate(&mut grads[*a], nodes[*a].value.shape(), |ga| {
                for x in ga.iter_mut() {
                    *x += s;
                }
            });
        }
        Op::SumRows(a) => {
            let av = &nodes[*a].value;
            let w = av.cols();
            accumulate(&mut grads[*a], av.shape(), |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += gd[i % w];
                }
            });
        }
        Op::Reshape(a) => {
            accumulate(&mut grads[*a], nodes[*a].value.shape(), |ga| {
                for (x, y) in ga.iter_mut().zip(gd) {
                    *x += y;
                }
            });
        }
        Op::CrossEntropy(a, labels) => {
            let av = &nodes[*a].value;
            let k = av.cols();
            let n = labels.len();
            let scale = gd[0] / n as f64;
            accumulate(&mut grads[*a], av.shape(), |ga| {
                for (r, &label) in labels.iter().enumerate() {
                    let row = av.row(r);
                    let probs = softmax(row);
                    for c in 0..k {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        ga[r * k + c] += scale * (probs[c] - onehot);
                    }
                }
            });
        }
    }
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Tensor::clone)
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        self.tape.with_value(self.id, f)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.with_value(Tensor::item)
    }

    pub fn rows(&self) -> usize {
        self.with_value(Tensor::rows)
    }

    pub fn cols(&self) -> usize {
        self.with_value(Tensor::cols)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let value = self.with_value(|t| t.map(f));
        self.tape.push(value, op, &[self.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_same(&[other]);
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        self.tape
            .push(value, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.tape.check_same(&[other]);
        let (value, bc) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let bc = if a.shape() == b.shape() {
                Bcast::Same
            } else if b.numel() == 1 {
                Bcast::Scalar
            } else if a.ndim() == 2 && b.numel() == a.cols() && (b.ndim() == 1 || (b.ndim() == 2 && b.rows() == 1)) {
                Bcast::Row
            } else {
                return Err(Error::dim(format!(
                    "incompatible shapes for elementwise op: {:?} and {:?}",
                    a.shape(),
                    b.shape()
                )));
            };
            let bd = b.data();
            let cols = b.numel();
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            };
            let data: Vec<f64> = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = match bc {
                        Bcast::Same => bd[i],
                        Bcast::Row => bd[i % cols],
                        Bcast::Scalar => bd[0],
                    };
                    f(x, y)
                })
                .collect();
            (Tensor::new(a.shape().to_vec(), data)?, bc)
        };
        self.tape
            .push(value, Op::Binary(kind, self.id, other.id, bc), &[self.id, other.id])
    }

    /// Elementwise sum. `other` may be same-shaped, a row broadcast over
    /// every row, or a single element.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn softplus_shifted(self) -> Result<Var<'t>> {
        self.unary(Op::SoftplusShifted(self.id), softplus_shifted)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn pow(self, p: f64) -> Result<Var<'t>> {
        self.unary(Op::Pow(self.id, p), |x| x.powf(p))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.with_value(Tensor::sum);
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.with_value(Tensor::numel);
        if n == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Column sums of a matrix, shape `[1 x d]`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            let (m, n) = t.as_matrix("sum_rows")?;
            let mut out = vec![0.0; n];
            for r in 0..m {
                for (o, x) in out.iter_mut().zip(t.row(r)) {
                    *o += x;
                }
            }
            Tensor::new([1, n], out)
        })?;
        self.tape.push(value, Op::SumRows(self.id), &[self.id])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.with_value(|t| t.reshape(shape))?;
        self.tape.push(value, Op::Reshape(self.id), &[self.id])
    }

    pub fn gather_rows(self, ids: &Arc<[usize]>) -> Result<Var<'t>> {
        let value = self.with_value(|t| t.gather_rows(ids))?;
        self.tape.push(value, Op::Gather(self.id, ids.clone()), &[self.id])
    }

    /// Row `i` of the result is the sum of rows whose id is `i`; empty
    /// segments are zero.
    pub fn segment_sum(self, ids: &Arc<[usize]>, num_segments: usize) -> Result<Var<'t>> {
        let value = self.with_value(|t| segment_sum_forward(t, ids, num_segments))?;
        self.tape.push(value, Op::SegmentSum(self.id, ids.clone()), &[self.id])
    }

    /// Mean softmax cross-entropy of `[n x k]` logits against class labels.
    pub fn cross_entropy(self, labels: &Arc<[usize]>) -> Result<Var<'t>> {
        let value = self.with_value(|t| -> Result<f64> {
            let (n, k) = t.as_matrix("cross_entropy")?;
            if n != labels.len() {
                return Err(Error::dim(format!("{} logit rows but {} labels", n, labels.len())));
            }
            if n == 0 {
                return Err(Error::contract("cross_entropy over zero rows"));
            }
            let mut total = 0.0;
            for (r, &l) in labels.iter().enumerate() {
                if l >= k {
                    return Err(Error::Index(format!("label {l} out of range for {k} classes")));
                }
                total -= log_softmax(t.row(r))[l];
            }
            Ok(total / n as f64)
        })?;
        self.tape.push(
            Tensor::scalar(value),
            Op::CrossEntropy(self.id, labels.clone()),
            &[self.id],
        )
    }
}

pub fn segment_sum_forward(t: &Tensor, ids: &[usize], num_segments: usize) -> Result<Tensor> {
    let (m, n) = t.as_matrix("segment_sum")?;
    if ids.len() != m {
        return Err(Error::dim(format!(
            "segment_sum: {} rows but {} segment ids",
            m,
            ids.len()
        )));
    }
    let mut out = vec![0.0; num_segments * n];
    for (r, &seg) in ids.iter().enumerate() {
        if seg >= num_segments {
            return Err(Error::Index(format!(
                "segment id {seg} at row {r} out of range for {num_segments} segments"
            )));
        }
        for (o, x) in out[seg * n..(seg + 1) * n].iter_mut().zip(t.row(r)) {
            *o += x;
        }
    }
    Tensor::new([num_segments, n], out)
}

/// Gradients of every tracked leaf from one backward sweep.
pub struct Gradients {
    leaves: Vec<(usize, Tensor)>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a tracked leaf; `None` if `v` is not one.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.leaves
            .binary_search_by_key(&v.id, |(id, _)| *id)
            .ok()
            .map(|i| &self.leaves[i].1)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, i)| &self.leaves[*i].1)
    }

    /// Consumes the gradients into per-parameter tensors indexed by id.
    pub fn into_params(self, num_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..num_params).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = self.leaves.into_iter().map(|(_, g)| Some(g)).collect();
        for (p, i) in self.params {
            if p.index() < num_params {
                out[p.index()] = leaves[i].take();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_shifted_is_zero_at_origin() {
        assert_eq!(softplus_shifted(0.0), 0.0);
        assert!((softplus_shifted(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-9);
        assert!((softplus_shifted(-800.0) + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn relu_clamps_negative() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.5, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn segment_sum_examples() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&[[1.0], [2.0], [3.0]]));
        let ids: Arc<[usize]> = vec![0, 0, 1].into();
        assert_eq!(v.segment_sum(&ids, 2).unwrap().value().data(), &[3.0, 3.0]);

        let v = tape.constant(Tensor::from_rows(&[[1.0], [2.0]]));
        let ids: Arc<[usize]> = vec![1, 1].into();
        assert_eq!(v.segment_sum(&ids, 3).unwrap().value().data(), &[0.0, 3.0, 0.0]);
    }

    #[test]
    fn segment_sum_rejects_out_of_range() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&[[1.0]]));
        let ids: Arc<[usize]> = vec![2].into();
        assert!(matches!(v.segment_sum(&ids, 2), Err(Error::Index(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).with_grad());
        let loss = p.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let loss = p.mul(p).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let q = tape.leaf(Tensor::vector(vec![5.0]).with_grad());
        let loss = p.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(q).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1e300]));
        assert!(matches!(x.mul(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn broadcast_rules() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let row = tape.constant(Tensor::from_rows(&[[10.0, 20.0]]));
        let s = tape.constant(Tensor::scalar(2.0));
        assert_eq!(a.add(row).unwrap().value().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(a.mul(s).unwrap().value().data(), &[2.0, 4.0, 6.0, 8.0]);
        let bad = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(a.add(bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn concat_requires_equal_rows() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 1]));
        let b = tape.constant(Tensor::zeros([3, 1]));
        assert!(tape.concat(&[a, b]).is_err());
    }

    #[test]
    fn tape_is_send() {
        fn assert_send<T: Send>() {}
        assert_send::<Tape>();
        assert_send::<Gradients>();
    }
}
