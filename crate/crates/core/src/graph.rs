//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation appends a node holding its output value. Inputs always
//! precede their consumers, so [`Graph::backward`] simply walks the tape in
//! reverse. Leaf gradients accumulate across backward passes until
//! [`Graph::zero_grad`] is called.

use std::sync::Arc;

use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddRowBias,
    LeakyRelu,
    Softplus,
    Exp,
    Log,
    Sum,
    Mean,
    L2NormalizeRows,
    DotRows,
    LogSumExpRows,
    Square,
    GatherRows,
    ConcatRows,
    ConcatCols,
    Transpose,
    RowAffine,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("{op:?}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op:?}: non-finite input")]
    NonFinite { op: OpKind },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op:?}: index {index} out of range for {rows} rows")]
    IndexOutOfRange { op: OpKind, index: usize, rows: usize },
}

/// Per-row affine map `y = x·M + t` with `M` of shape `dim × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMap {
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

/// A batch of per-row affine maps. `None` rows pass through untouched, which
/// keeps identity rows bitwise equal to their input.
#[derive(Clone, Debug, PartialEq)]
pub struct RowAffine {
    pub dim: usize,
    pub rows: Vec<Option<RowMap>>,
}

impl RowAffine {
    pub fn apply_row(&self, r: usize, x: &[f64], out: &mut [f64]) {
        match &self.rows[r] {
            None => out.copy_from_slice(x),
            Some(map) => {
                let d = self.dim;
                for j in 0..d {
                    let mut acc = 0.0;
                    for i in 0..d {
                        acc += x[i] * map.matrix[i * d + j];
                    }
                    out[j] = acc + map.offset[j];
                }
            }
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for r in 0..x.rows() {
            self.apply_row(r, x.row(r), out.row_mut(r));
        }
        out
    }

    pub fn is_identity(&self) -> bool {
        self.rows.iter().all(Option::is_none)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows(Var),
    DotRows(Var, Var),
    LogSumExpRows(Var),
    Square(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    Transpose(Var),
    RowAffine(Var, Arc<RowAffine>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::L2NormalizeRows(..) => OpKind::L2NormalizeRows,
            Op::DotRows(..) => OpKind::DotRows,
            Op::LogSumExpRows(..) => OpKind::LogSumExpRows,
            Op::Square(..) => OpKind::Square,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Transpose(..) => OpKind::Transpose,
            Op::RowAffine(..) => OpKind::RowAffine,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of leaky-relu; the kink at zero takes the negative-side slope.
pub fn leaky_relu_slope(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    strict: bool,
}

enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that rejects non-finite operands at every op.
    pub fn strict() -> Self {
        Graph {
            nodes: Vec::new(),
            strict: true,
        }
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v`'s current value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
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

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v` as a tensor, zero-filled when none was accumulated.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad length"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, op: OpKind, inputs: &[Var]) -> Result<(), GraphError> {
        if self.strict && inputs.iter().any(|v| !self.nodes[v.0].value.all_finite()) {
            return Err(GraphError::NonFinite { op });
        }
        Ok(())
    }

    fn mismatch(&self, op: OpKind, a: Var, b: Var) -> GraphError {
        GraphError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn broadcast(&self, op: OpKind, a: Var, b: Var) -> Result<Broadcast, GraphError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.is_scalar() {
            Ok(Broadcast::RhsScalar)
        } else if ta.is_scalar() {
            Ok(Broadcast::LhsScalar)
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    fn binary(
        &mut self,
        kind: OpKind,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, GraphError> {
        self.check_finite(kind, &[a, b])?;
        let mode = self.broadcast(kind, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        Ok(match mode {
            Broadcast::Same => {
                let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
                Tensor::new(ta.shape().to_vec(), data).unwrap()
            }
            Broadcast::RhsScalar => {
                let y = tb.item();
                let data = ta.data().iter().map(|x| f(*x, y)).collect();
                Tensor::new(ta.shape().to_vec(), data).unwrap()
            }
            Broadcast::LhsScalar => {
                let x = ta.item();
                let data = tb.data().iter().map(|y| f(x, *y)).collect();
                Tensor::new(tb.shape().to_vec(), data).unwrap()
            }
        })
    }

    fn unary(&mut self, kind: OpKind, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor, GraphError> {
        self.check_finite(kind, &[a])?;
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        Ok(Tensor::new(ta.shape().to_vec(), data).unwrap())
    }

    fn require_matrix(&self, op: OpKind, a: Var) -> Result<(usize, usize), GraphError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(GraphError::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.check_finite(OpKind::MatMul, &[a, b])?;
        let (m, k) = self.require_matrix(OpKind::MatMul, a)?;
        let (k2, n) = self.require_matrix(OpKind::MatMul, b)?;
        if k != k2 {
            return Err(self.mismatch(OpKind::MatMul, a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let t = self.binary(OpKind::Add, a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let t = self.binary(OpKind::Sub, a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let t = self.binary(OpKind::Mul, a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, GraphError> {
        let t = self.unary(OpKind::Scale, a, |x| x * s)?;
        Ok(self.push(t, Op::Scale(a, s), &[a]))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, GraphError> {
        self.scale(a, -1.0)
    }

    /// Adds a length-`C` bias vector to every row of an `(R, C)` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var, GraphError> {
        self.check_finite(OpKind::AddRowBias, &[a, bias])?;
        let (_, c) = self.require_matrix(OpKind::AddRowBias, a)?;
        if self.value(bias).numel() != c {
            return Err(self.mismatch(OpKind::AddRowBias, a, bias));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(self.push(out, Op::AddRowBias(a, bias), &[a, bias]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, GraphError> {
        let t = self.unary(OpKind::LeakyRelu, a, |x| if x > 0.0 { x } else { slope * x })?;
        Ok(self.push(t, Op::LeakyRelu(a, slope), &[a]))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, GraphError> {
        let t = self.unary(OpKind::Softplus, a, softplus)?;
        Ok(self.push(t, Op::Softplus(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GraphError> {
        let t = self.unary(OpKind::Exp, a, f64::exp)?;
        Ok(self.push(t, Op::Exp(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GraphError> {
        let t = self.unary(OpKind::Log, a, f64::ln)?;
        Ok(self.push(t, Op::Log(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, GraphError> {
        let t = self.unary(OpKind::Square, a, |x| x * x)?;
        Ok(self.push(t, Op::Square(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check_finite(OpKind::Sum, &[a])?;
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check_finite(OpKind::Mean, &[a])?;
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), &[a]))
    }

    /// Scales each row to unit Euclidean norm. Zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check_finite(OpKind::L2NormalizeRows, &[a])?;
        self.require_matrix(OpKind::L2NormalizeRows, a)?;
        let mut out = self.value(a).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_exact_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        Ok(self.push(out, Op::L2NormalizeRows(a), &[a]))
    }

    /// Row-wise inner products of two `(R, C)` matrices, giving `(R, 1)`.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.check_finite(OpKind::DotRows, &[a, b])?;
        let (r, _) = self.require_matrix(OpKind::DotRows, a)?;
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(OpKind::DotRows, a, b));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .row_iter()
            .zip(tb.row_iter())
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        Ok(self.push(Tensor::matrix(r, 1, data), Op::DotRows(a, b), &[a, b]))
    }

    /// Row-wise `log Σ exp`, giving `(R, 1)`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check_finite(OpKind::LogSumExpRows, &[a])?;
        let (r, _) = self.require_matrix(OpKind::LogSumExpRows, a)?;
        let data = self.value(a).row_iter().map(logsumexp).collect();
        Ok(self.push(Tensor::matrix(r, 1, data), Op::LogSumExpRows(a), &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, GraphError> {
        self.check_finite(OpKind::GatherRows, &[a])?;
        self.require_matrix(OpKind::GatherRows, a)?;
        let rows = self.value(a).rows();
        if let Some(&index) = indices.iter().find(|&&i| i >= rows) {
            return Err(GraphError::IndexOutOfRange {
                op: OpKind::GatherRows,
                index,
                rows,
            });
        }
        let out = self.value(a).gather_rows(indices);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.check_finite(OpKind::ConcatRows, &[a, b])?;
        let (ra, ca) = self.require_matrix(OpKind::ConcatRows, a)?;
        let (rb, cb) = self.require_matrix(OpKind::ConcatRows, b)?;
        if ca != cb {
            return Err(self.mismatch(OpKind::ConcatRows, a, b));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::matrix(ra + rb, ca, data), Op::ConcatRows(a, b), &[a, b]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.check_finite(OpKind::ConcatCols, &[a, b])?;
        let (ra, ca) = self.require_matrix(OpKind::ConcatCols, a)?;
        let (rb, cb) = self.require_matrix(OpKind::ConcatCols, b)?;
        if ra != rb {
            return Err(self.mismatch(OpKind::ConcatCols, a, b));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for (x, y) in ta.row_iter().zip(tb.row_iter()) {
            data.extend_from_slice(x);
            data.extend_from_slice(y);
        }
        Ok(self.push(Tensor::matrix(ra, ca + cb, data), Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check_finite(OpKind::Transpose, &[a])?;
        self.require_matrix(OpKind::Transpose, a)?;
        let out = self.value(a).transpose();
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Applies a per-row affine map; the maps themselves are constants.
    pub fn row_affine(&mut self, a: Var, maps: Arc<RowAffine>) -> Result<Var, GraphError> {
        self.check_finite(OpKind::RowAffine, &[a])?;
        let (r, c) = self.require_matrix(OpKind::RowAffine, a)?;
        if maps.rows.len() != r || maps.dim != c {
            return Err(GraphError::ShapeMismatch {
                op: OpKind::RowAffine,
                lhs: vec![r, c],
                rhs: vec![maps.rows.len(), maps.dim],
            });
        }
        let out = maps.apply(self.value(a));
        Ok(self.push(out, Op::RowAffine(a, maps), &[a]))
    }

    /// Back-propagates from a scalar `loss`, seeding its gradient with 1 and
    /// accumulating into every reachable node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<(), GraphError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(GraphError::NotScalar(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        // Runs `$body` with the adjoint buffer of `$v`, skipping vars that need
        // no gradient. Only one buffer is borrowed at a time, so an op that uses
        // the same input twice (e.g. mul(x, x)) accumulates both contributions.
        macro_rules! with_slot {
            ($v:expr, |$buf:ident| $body:expr) => {
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.numel();
                    let $buf: &mut Vec<f64> = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
                    $body
                }
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                with_slot!(*a, |buf| gemm(m, n, k, g, false, tb.data(), true, buf, true));
                with_slot!(*b, |buf| gemm(k, m, n, ta.data(), true, g, false, buf, true));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    with_slot!(v, |buf| {
                        if buf.len() == g.len() {
                            buf.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                        } else {
                            buf[0] += s * g.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let o = nodes[other.0].value.data();
                    with_slot!(v, |buf| {
                        if buf.len() == g.len() {
                            if o.len() == g.len() {
                                buf.iter_mut()
                                    .zip(g.iter().zip(o))
                                    .for_each(|(x, (gy, oy))| *x += gy * oy);
                            } else {
                                buf.iter_mut().zip(g).for_each(|(x, gy)| *x += gy * o[0]);
                            }
                        } else {
                            // `v` is the broadcast scalar.
                            buf[0] += g.iter().zip(o).map(|(gy, oy)| gy * oy).sum::<f64>();
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                with_slot!(*a, |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::AddRowBias(a, bias) => {
                with_slot!(*a, |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let c = out.cols();
                with_slot!(*bias, |buf| {
                    for row in g.chunks_exact(c) {
                        buf.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = nodes[a.0].value.data();
                with_slot!(*a, |buf| {
                    for ((d, gy), xv) in buf.iter_mut().zip(g).zip(x) {
                        *d += gy * leaky_relu_slope(*xv, *slope);
                    }
                });
            }
            Op::Softplus(a) => {
                let x = nodes[a.0].value.data();
                with_slot!(*a, |buf| {
                    for ((d, gy), xv) in buf.iter_mut().zip(g).zip(x) {
                        *d += gy * sigmoid(*xv);
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                with_slot!(*a, |buf| {
                    for ((d, gy), yv) in buf.iter_mut().zip(g).zip(y) {
                        *d += gy * yv;
                    }
                });
            }
            Op::Log(a) => {
                let x = nodes[a.0].value.data();
                with_slot!(*a, |buf| {
                    for ((d, gy), xv) in buf.iter_mut().zip(g).zip(x) {
                        *d += gy / xv;
                    }
                });
            }
            Op::Square(a) => {
                let x = nodes[a.0].value.data();
                with_slot!(*a, |buf| {
                    for ((d, gy), xv) in buf.iter_mut().zip(g).zip(x) {
                        *d += 2.0 * xv * gy;
                    }
                });
            }
            Op::Sum(a) => {
                with_slot!(*a, |buf| buf.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                with_slot!(*a, |buf| {
                    let s = g[0] / buf.len() as f64;
                    buf.iter_mut().for_each(|x| *x += s);
                });
            }
            Op::L2NormalizeRows(a) => {
                let x = &nodes[a.0].value;
                let c = x.cols();
                with_slot!(*a, |buf| {
                    for (r, (xr, yr)) in x.row_iter().zip(out.row_iter()).enumerate() {
                        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        let gr = &g[r * c..(r + 1) * c];
                        let yg: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            buf[r * c + j] += (gr[j] - yr[j] * yg) / n;
                        }
                    }
                });
            }
            Op::DotRows(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let o = &nodes[other.0].value;
                    let c = o.cols();
                    with_slot!(v, |buf| {
                        for (r, orow) in o.row_iter().enumerate() {
                            for j in 0..c {
                                buf[r * c + j] += g[r] * orow[j];
                            }
                        }
                    });
                }
            }
            Op::LogSumExpRows(a) => {
                let x = &nodes[a.0].value;
                let c = x.cols();
                with_slot!(*a, |buf| {
                    for (r, xr) in x.row_iter().enumerate() {
                        let lse = out.data()[r];
                        for j in 0..c {
                            buf[r * c + j] += g[r] * (xr[j] - lse).exp();
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = out.cols();
                with_slot!(*a, |buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[src * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = nodes[a.0].value.numel();
                with_slot!(*a, |buf| buf.iter_mut().zip(&g[..na]).for_each(|(x, y)| *x += y));
                with_slot!(*b, |buf| buf.iter_mut().zip(&g[na..]).for_each(|(x, y)| *x += y));
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[a.0].value.cols();
                let cb = nodes[b.0].value.cols();
                let c = ca + cb;
                with_slot!(*a, |buf| {
                    for (dst, src) in buf.chunks_exact_mut(ca).zip(g.chunks_exact(c)) {
                        dst.iter_mut().zip(&src[..ca]).for_each(|(x, y)| *x += y);
                    }
                });
                with_slot!(*b, |buf| {
                    for (dst, src) in buf.chunks_exact_mut(cb).zip(g.chunks_exact(c)) {
                        dst.iter_mut().zip(&src[ca..]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                // out is r×c, input c×r.
                with_slot!(*a, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::RowAffine(a, maps) => {
                let d = maps.dim;
                with_slot!(*a, |buf| {
                    for (r, map) in maps.rows.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let dst = &mut buf[r * d..(r + 1) * d];
                        match map {
                            None => dst.iter_mut().zip(gr).for_each(|(x, y)| *x += y),
                            Some(m) => {
                                for i in 0..d {
                                    let mut acc = 0.0;
                                    for j in 0..d {
                                        acc += gr[j] * m.matrix[i * d + j];
                                    }
                                    dst[i] += acc;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Stable `log Σ exp` of a slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
            }};
        }
        pub(crate) use assert_close;
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i3 = g.constant(Tensor::eye(3));
        let a = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
        let y = g.matmul(i3, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn leaky_relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[-1.0, 0.0, 2.0]]));
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).data(), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[3.0, 4.0]]));
        let y = g.l2_normalize_rows(x).unwrap();
        assert_close!(g.value(y).data()[0], 0.6, 1e-15);
        assert_close!(g.value(y).data()[1], 0.8, 1e-15);
    }

    #[test]
    fn l2_normalize_zero_row_is_total() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]));
        let y = g.l2_normalize_rows(x).unwrap();
        assert_eq!(g.value(y).row(0), &[0.0, 0.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(&g.grad(x).unwrap()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let xx = g.mul(x, x).unwrap();
        let loss = g.sum(xx).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn mean_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -3.0, 2.0, 7.0]));
        let loss = g.mean(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn logsumexp_softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[0.0, 0.0]]));
        let l = g.logsumexp_rows(x).unwrap();
        let loss = g.sum(l).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.5, 0.5]);
        assert_close!(g.value(loss).item(), std::f64::consts::LN_2, 1e-15);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.3, -1.2, 2.5]));
        let s = g.softplus(x).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(loss).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(g.backward(x), Err(GraphError::NotScalar(vec![2])));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("MatMul") && msg.contains("[2, 3]"), "{msg}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, c), Err(GraphError::ShapeMismatch { op: OpKind::Add, .. })));
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let s = g.param(Tensor::scalar(3.0));
        let y = g.mul(a, s).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 9.0, 12.0]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[10.0]);
        assert_eq!(g.grad(a).unwrap(), &[3.0; 4]);
    }

    #[test]
    fn strict_mode_rejects_non_finite() {
        let mut g = Graph::strict();
        let x = g.constant(Tensor::vector(vec![1.0, f64::NAN]));
        assert_eq!(g.exp(x), Err(GraphError::NonFinite { op: OpKind::Exp }));
        let mut lax = Graph::new();
        let x = lax.constant(Tensor::vector(vec![1.0, f64::NAN]));
        assert!(lax.exp(x).is_ok());
    }

    #[test]
    fn backward_order_respects_tape() {
        // mul(x, x) uses the same input twice; both contributions must land.
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let z = g.mul(y, x).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[27.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = g.param(Tensor::vector(vec![0.5, 0.5]));
        let y = g.mul(c, p).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap(), &[1.0, 2.0]);
    }
}
