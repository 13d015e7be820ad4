//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and, when any input needs
//! a gradient, the information required to push gradients back to its parents.
//! Nodes are appended in execution order, so walking the tape backwards is a
//! valid topological order and each node is visited exactly once.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward pass is computed by the caller and whose
/// vector-Jacobian product is supplied through this trait.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (or `None` when the input is not
    /// differentiable) given the gradient of the output.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Relu(Var),
    Softplus(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    MaskedFill(Var, Arc<Vec<bool>>),
    Softmax(Var),
    LogSumExp(Var),
    Dropout(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows(Var, Vec<f64>),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::leaf`] or [`Tape::param`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Adds another set of parameter gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

/// Records operations for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    training: bool,
    consumed: bool,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("grad_enabled", &self.grad_enabled)
            .field("training", &self.training)
            .finish()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `(rows, cols)` view used for two-dimensional broadcasting.
fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, Vec<usize>)> {
    if a.shape() == b.shape() {
        return Ok((a.rows(), a.cols(), a.shape().to_vec()));
    }
    let (ar, ac) = dims2(a);
    let (br, bc) = dims2(b);
    let rows_ok = ar == br || ar == 1 || br == 1;
    let cols_ok = ac == bc || ac == 1 || bc == 1;
    if !(rows_ok && cols_ok) || a.rank() > 2 || b.rank() > 2 {
        return Err(mismatch(op, a, b));
    }
    let rows = ar.max(br);
    let cols = ac.max(bc);
    let shape = if a.numel() == rows * cols {
        a.shape().to_vec()
    } else if b.numel() == rows * cols {
        b.shape().to_vec()
    } else {
        vec![rows, cols]
    };
    Ok((rows, cols, shape))
}

#[inline]
fn bidx(dims: (usize, usize), r: usize, c: usize) -> usize {
    let rr = if dims.0 == 1 { 0 } else { r };
    let cc = if dims.1 == 1 { 0 } else { c };
    rr * dims.1 + cc
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let (rows, cols, shape) = broadcast_shape(op, a, b)?;
    let (da, db) = (dims2(a), dims2(b));
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(f(a.data()[bidx(da, r, c)], b.data()[bidx(db, r, c)]));
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Sums a full-size `(rows × cols)` gradient down to the broadcast operand.
fn reduce_to(grad: &[f64], rows: usize, cols: usize, target: &Tensor) -> Tensor {
    if grad.len() == target.numel() && target.rows() == rows {
        return Tensor::from_parts(target.shape().to_vec(), grad.to_vec());
    }
    let dims = dims2(target);
    let mut out = vec![0.0; target.numel()];
    for r in 0..rows {
        for c in 0..cols {
            out[bidx(dims, r, c)] += grad[r * cols + c];
        }
    }
    Tensor::from_parts(target.shape().to_vec(), out)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("expected a matrix, got shape {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

impl Tape {
    /// A tape that records gradients, in training mode.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            training: true,
            consumed: false,
            param_vars: HashMap::new(),
        }
    }

    /// A tape that evaluates values only, in eval mode.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            training: false,
            ..Self::new()
        }
    }

    pub fn with_training(mut self, training: bool) -> Self {
        self.training = training;
        self
    }

    pub fn with_grad(mut self, enabled: bool) -> Self {
        self.grad_enabled = enabled;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad || matches!(op, Op::Leaf | Op::Param(_)) {
            op
        } else {
            Op::Constant
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_shared(Arc::new(value), op, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_shared(Arc::new(value), Op::Constant, false)
    }

    /// A differentiable input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_shared(Arc::new(value), Op::Leaf, true)
    }

    /// Places a parameter on the tape. Repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push_shared(store.shared(id), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.push_shared(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", ta)?;
        let (k2, n) = require_2d("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_2d("transpose", t)?;
        let out = transpose_raw(t.data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a]))
    }

    /// Elementwise sum with row/column broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "exp" });
        }
        let out = t.map(f64::exp);
        Ok(self.push(out, Op::Exp(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "log" });
        }
        if t.data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "log",
                reason: "input must be positive".into(),
            });
        }
        let out = t.map(f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sin);
        self.push(out, Op::Sin(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// `ln(1 + e^x)` evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis of a matrix, keeping the reduced axis with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_2d("sum_axis", t)?;
        let out = match axis {
            0 => {
                let mut o = vec![0.0; c];
                for row in t.data().chunks(c) {
                    for (acc, v) in o.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::from_parts(vec![1, c], o)
            }
            1 => Tensor::from_parts(vec![r, 1], t.data().chunks(c).map(|row| row.iter().sum()).collect()),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "sum_axis",
                    reason: format!("axis {axis} out of range for a matrix"),
                })
            }
        };
        Ok(self.push(out, Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_2d("mean_axis", t)?;
        let n = if axis == 0 { r } else { c };
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Concatenates matrices along the last axis; row counts must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_last",
            reason: "no inputs".into(),
        })?);
        let rows = first.rows();
        let lead: Vec<usize> = first.shape()[..first.rank().saturating_sub(1)].to_vec();
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows || t.rank() != first.rank() {
                return Err(mismatch("concat_last", first, t));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Stacks matrices along the first axis; column counts must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?);
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", first, t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start >= end || end > t.rows() {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                reason: format!("range {start}..{end} invalid for {} rows", t.rows()),
            });
        }
        let c = t.cols();
        let data = t.data()[start * c..end * c].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![end - start, c], data),
            Op::SliceRows(a, start),
            &[a],
        ))
    }

    /// Embedding lookup: rows of `table` selected by `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = require_2d("gather_rows", t)?;
        if indices.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                reason: "no indices".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                reason: format!("index {bad} out of range for table with {r} rows"),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), c], data),
            Op::Gather(table, indices.to_vec()),
            &[table],
        ))
    }

    /// Replaces masked entries with `fill`. The mask covers either the whole
    /// tensor or one row, in which case it is broadcast over rows.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        if mask.len() != t.numel() && mask.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let full = mask.len() == t.numel();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let m = if full { mask[i] } else { mask[i % cols] };
                if m {
                    fill
                } else {
                    v
                }
            })
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::MaskedFill(a, Arc::new(mask.to_vec())), &[a]))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        for row in t.data().chunks(t.cols()) {
            if !row.iter().any(|v| v.is_finite()) || row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(TensorError::NonFinite { op: "softmax" });
            }
        }
        let out = softmax_rows(t);
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// `log Σ exp` over the last axis, keeping it with extent 1. Entries equal
    /// to negative infinity are allowed and contribute nothing.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = Vec::with_capacity(t.rows());
        for row in t.data().chunks(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() || row.iter().any(|v| v.is_nan()) {
                return Err(TensorError::NonFinite { op: "logsumexp" });
            }
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            out.push(m + s.ln());
        }
        let mut shape = t.shape().to_vec();
        match shape.last_mut() {
            Some(l) => *l = 1,
            None => shape.push(1),
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSumExp(a), &[a]))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`. Identity in eval
    /// mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                reason: format!("probability {p} outside [0, 1)"),
            });
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::Dropout(a, mask), &[a]))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != cols || b.numel() != cols {
            return Err(mismatch("layer_norm", t, g));
        }
        let mut normed = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mean) * is;
                normed.push(n);
                out.push(n * g.data()[j] + b.data()[j]);
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 1e-12) || !n.is_finite() {
                return Err(TensorError::InvalidArgument {
                    op: "l2_normalize_rows",
                    reason: "row with zero or non-finite norm".into(),
                });
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(out, Op::L2NormalizeRows(a, norms), &[a]))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Tensor) -> Var {
        self.push(value, Op::Custom(op, inputs.to_vec()), inputs)
    }

    /// Backpropagates from a scalar loss.
    ///
    /// A tape supports a single backward pass; a second call is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if !t.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: t.shape().to_vec(),
            });
        }
        let seed = Tensor::from_parts(t.shape().to_vec(), vec![1.0]);
        self.backward_seeded(&[(loss, seed)])
    }

    /// Vector-Jacobian product: backpropagates the given output gradients.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::AlreadyBackpropagated);
        }
        if self.nodes.is_empty() {
            return Err(TensorError::NothingToDifferentiate);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut any = false;
        for (v, g) in seeds {
            let val = self.value(*v);
            if val.shape() != g.shape() && val.numel() != g.numel() {
                return Err(mismatch("backward seed", val, g));
            }
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            any = true;
            let g = Tensor::from_parts(val.shape().to_vec(), g.data().to_vec());
            accumulate(&mut grads[v.0], g)?;
        }
        if !any {
            return Err(TensorError::NothingToDifferentiate);
        }
        self.consumed = true;

        let mut out = Gradients::default();
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(idx, g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g.clone());
                    out.leaves.insert(idx, g);
                }
                Op::Constant => {}
                op => {
                    for (parent, pg) in self.local_grads(op, &node.value, &g)? {
                        if self.nodes[parent.0].requires_grad {
                            accumulate(&mut grads[parent.0], pg)?;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn local_grads(&self, op: &Op, y: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: &Var| self.value(*v);
        let same = |src: &Tensor, data: Vec<f64>| Tensor::from_parts(src.shape().to_vec(), data);
        let unary = |a: &Var, f: &dyn Fn(usize, f64) -> f64| -> Vec<(Var, Tensor)> {
            let x = val(a);
            let data = g.data().iter().enumerate().map(|(i, &gv)| f(i, gv)).collect();
            vec![(*a, same(x, data))]
        };
        Ok(match op {
            Op::Constant | Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let bt = transpose_raw(tb.data(), k, n);
                let ga = matmul_raw(g.data(), &bt, m, n, k);
                let at = transpose_raw(ta.data(), m, k);
                let gb = matmul_raw(&at, g.data(), k, m, n);
                vec![(*a, same(ta, ga)), (*b, same(tb, gb))]
            }
            Op::Transpose(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                vec![(*a, same(val(a), transpose_raw(g.data(), r, c)))]
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let (rows, cols) = dims2(y);
                let ga = reduce_to(g.data(), rows, cols, val(a));
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let gneg: Vec<f64> = g.data().iter().map(|v| v * sign).collect();
                let gb = reduce_to(&gneg, rows, cols, val(b));
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (rows, cols) = dims2(y);
                let (ta, tb) = (val(a), val(b));
                let (da, db) = (dims2(ta), dims2(tb));
                let mut fa = vec![0.0; rows * cols];
                let mut fb = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let gv = g.data()[r * cols + c];
                        fa[r * cols + c] = gv * tb.data()[bidx(db, r, c)];
                        fb[r * cols + c] = gv * ta.data()[bidx(da, r, c)];
                    }
                }
                vec![(*a, reduce_to(&fa, rows, cols, ta)), (*b, reduce_to(&fb, rows, cols, tb))]
            }
            Op::Scale(a, s) => unary(a, &|_, gv| gv * s),
            Op::AddScalar(a) => unary(a, &|_, gv| gv),
            Op::Exp(a) => unary(a, &|i, gv| gv * y.data()[i]),
            Op::Log(a) => {
                let x = val(a);
                unary(a, &|i, gv| gv / x.data()[i])
            }
            Op::Sin(a) => {
                let x = val(a);
                unary(a, &|i, gv| gv * x.data()[i].cos())
            }
            Op::Relu(a) => {
                let x = val(a);
                unary(a, &|i, gv| if x.data()[i] > 0.0 { gv } else { 0.0 })
            }
            Op::Softplus(a) => {
                let x = val(a);
                unary(a, &|i, gv| gv * sigmoid(x.data()[i]))
            }
            Op::SumAll(a) => {
                let x = val(a);
                vec![(*a, Tensor::filled(x.shape(), g.item()))]
            }
            Op::SumAxis(a, axis) => {
                let x = val(a);
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[i * c + j] = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                    }
                }
                vec![(*a, same(x, data))]
            }
            Op::ConcatLast(parts) => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let t = val(p);
                    let c = t.cols();
                    let mut data = Vec::with_capacity(t.numel());
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    res.push((*p, same(t, data)));
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let t = val(p);
                    let n = t.numel();
                    res.push((*p, same(t, g.data()[offset..offset + n].to_vec())));
                    offset += n;
                }
                res
            }
            Op::SliceRows(a, start) => {
                let x = val(a);
                let c = x.cols();
                let mut data = vec![0.0; x.numel()];
                data[start * c..start * c + g.numel()].copy_from_slice(g.data());
                vec![(*a, same(x, data))]
            }
            Op::Gather(table, idx) => {
                let t = val(table);
                let c = t.cols();
                let mut data = vec![0.0; t.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        data[i * c + j] += g.data()[k * c + j];
                    }
                }
                vec![(*table, same(t, data))]
            }
            Op::MaskedFill(a, mask) => {
                let cols = y.cols();
                let full = mask.len() == y.numel();
                unary(a, &|i, gv| {
                    let m = if full { mask[i] } else { mask[i % cols] };
                    if m {
                        0.0
                    } else {
                        gv
                    }
                })
            }
            Op::Softmax(a) => {
                let cols = y.cols();
                let mut data = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    data.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                vec![(*a, same(val(a), data))]
            }
            Op::LogSumExp(a) => {
                let x = val(a);
                let cols = x.cols();
                let mut data = Vec::with_capacity(x.numel());
                for (r, row) in x.data().chunks(cols).enumerate() {
                    let lse = y.data()[r];
                    let gv = g.data()[r];
                    data.extend(row.iter().map(|v| gv * (v - lse).exp()));
                }
                vec![(*a, same(x, data))]
            }
            Op::Dropout(a, mask) => unary(a, &|i, gv| gv * mask[i]),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let tx = val(x);
                let gm = val(gamma);
                let cols = tx.cols();
                let mut gg = vec![0.0; cols];
                let mut gb = vec![0.0; cols];
                let mut gx = Vec::with_capacity(tx.numel());
                for (r, (gr, nr)) in g.data().chunks(cols).zip(normed.chunks(cols)).enumerate() {
                    let mut mean_gn = 0.0;
                    let mut mean_gn_n = 0.0;
                    for j in 0..cols {
                        gg[j] += gr[j] * nr[j];
                        gb[j] += gr[j];
                        let gn = gr[j] * gm.data()[j];
                        mean_gn += gn;
                        mean_gn_n += gn * nr[j];
                    }
                    mean_gn /= cols as f64;
                    mean_gn_n /= cols as f64;
                    for j in 0..cols {
                        let gn = gr[j] * gm.data()[j];
                        gx.push(inv_std[r] * (gn - mean_gn - nr[j] * mean_gn_n));
                    }
                }
                vec![
                    (*x, same(tx, gx)),
                    (*gamma, same(gm, gg)),
                    (*beta, same(val(beta), gb)),
                ]
            }
            Op::L2NormalizeRows(a, norms) => {
                let cols = y.cols();
                let mut data = Vec::with_capacity(y.numel());
                for ((yr, gr), n) in y.data().chunks(cols).zip(g.data().chunks(cols)).zip(norms) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    data.extend(yr.iter().zip(gr).map(|(p, q)| (q - p * dot) / n));
                }
                vec![(*a, same(val(a), data))]
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(v)).collect();
                let gs = op.backward(&vals, y, g)?;
                if gs.len() != inputs.len() {
                    return Err(TensorError::InvalidArgument {
                        op: "custom backward",
                        reason: format!("{} returned {} gradients for {} inputs", op.name(), gs.len(), inputs.len()),
                    });
                }
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(v, g)| g.map(|g| (*v, g)))
                    .collect()
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
