//! Reverse-mode differentiation graph over dense arrays.
//!
//! A [`Graph`] is a per-step arena of nodes. Forward values are computed
//! eagerly in double precision as ops are applied; [`Graph::backward`]
//! replays the arena in reverse topological order and accumulates adjoints
//! exactly once per node. Graphs are cheap and rebuilt for every training
//! step; parameters live outside the graph (see `ParamStore`) and enter as
//! leaves.

use super::array::Array;
use thiserror::Error;

/// Self-normalizing ELU scale, standard published value.
pub const SELU_LAMBDA: f64 = 1.05070098;
/// Self-normalizing ELU alpha, standard published value.
pub const SELU_ALPHA: f64 = 1.67326324;

/// Largest exponent accepted by `exp`; beyond this f64 overflows to inf.
const EXP_MAX_ARG: f64 = 709.0;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain violation in {op}: operand value {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("zero-norm row {row} in weight normalization")]
    ZeroNormRow { row: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),
    #[error("{0}")]
    Invalid(String),
}

pub type DiffResult<T> = Result<T, DiffError>;

/// Handle to a node in one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGradient,
    Add,
    Sub,
    Mul,
    MatMul { trans_b: bool },
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Broadcast,
    Sum,
    Mean,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Selu,
    Softplus,
    LogSumExp,
    Dot,
    OneHotGather { indices: Vec<usize> },
    WeightNorm,
    SpectralApply { u: Vec<f64>, v: Vec<f64>, sigma: f64 },
}

struct Node {
    data: Array,
    op: Op,
    parents: Vec<ValueId>,
    requires_grad: bool,
}

/// Adjoints produced by one backward pass, indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Array> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros of the given shape if no path reached it.
    pub fn get_or_zeros(&self, id: ValueId, shape: &[usize]) -> Array {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Array::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Array {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].data.shape()
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, data: Array, op: Op, parents: Vec<ValueId>) -> ValueId {
        let requires_grad = match op {
            Op::Leaf | Op::StopGradient => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.push_with_grad_flag(data, op, parents, requires_grad)
    }

    fn push_with_grad_flag(
        &mut self,
        data: Array,
        op: Op,
        parents: Vec<ValueId>,
        requires_grad: bool,
    ) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { data, op, parents, requires_grad });
        id
    }

    // ── Leaves ───────────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Array, requires_grad: bool) -> ValueId {
        self.push_with_grad_flag(data, Op::Leaf, vec![], requires_grad)
    }

    pub fn constant(&mut self, data: Array) -> ValueId {
        self.leaf(data, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> ValueId {
        self.constant(Array::scalar(x))
    }

    // ── Elementwise binary ───────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> DiffResult<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> DiffResult<ValueId> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add, vec![a, b]))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> DiffResult<ValueId> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub, vec![a, b]))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> DiffResult<ValueId> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul, vec![a, b]))
    }

    // ── Linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> DiffResult<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let out = self.value(a).matmul(self.value(b));
        Ok(self.push(out, Op::MatMul { trans_b: false }, vec![a, b]))
    }

    /// a @ b^T; the transposed-operand form of the matmul primitive.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> DiffResult<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(DiffError::ShapeMismatch { op: "matmul_nt", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let out = self.value(a).matmul_t(self.value(b));
        Ok(self.push(out, Op::MatMul { trans_b: true }, vec![a, b]))
    }

    pub fn dot(&mut self, a: ValueId, b: ValueId) -> DiffResult<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sa != sb {
            return Err(DiffError::ShapeMismatch { op: "dot", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .sum();
        Ok(self.push(Array::scalar(s), Op::Dot, vec![a, b]))
    }

    // ── Structure ────────────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> DiffResult<ValueId> {
        if parts.is_empty() {
            return Err(DiffError::Invalid("concat of zero arrays".into()));
        }
        let rank = self.shape(parts[0]).len();
        if axis >= rank {
            return Err(DiffError::Invalid(format!("concat axis {axis} out of rank {rank}")));
        }
        let first_shape = self.shape(parts[0]).to_vec();
        let mut out_shape = first_shape.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == rank
                && s.iter()
                    .enumerate()
                    .all(|(i, &d)| i == axis || d == first_shape[i]);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first_shape,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let total_axis = out_shape[axis];
        let mut offset = 0;
        for &p in parts {
            let s_axis = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_start = (o * total_axis + offset) * inner;
                let src_start = o * s_axis * inner;
                data[dst_start..dst_start + s_axis * inner]
                    .copy_from_slice(&src[src_start..src_start + s_axis * inner]);
            }
            offset += s_axis;
        }
        Ok(self.push(Array::new(out_shape, data), Op::Concat { axis }, parts.to_vec()))
    }

    pub fn slice(&mut self, x: ValueId, axis: usize, start: usize, end: usize) -> DiffResult<ValueId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(DiffError::Invalid(format!(
                "slice [{start}, {end}) along axis {axis} invalid for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let take = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = take;
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * take * inner];
        for o in 0..outer {
            let src_start = (o * shape[axis] + start) * inner;
            let dst_start = o * take * inner;
            data[dst_start..dst_start + take * inner]
                .copy_from_slice(&src[src_start..src_start + take * inner]);
        }
        Ok(self.push(Array::new(out_shape, data), Op::Slice { axis, start }, vec![x]))
    }

    /// Right-aligned broadcast of `x` to `target` shape (numpy semantics).
    pub fn broadcast(&mut self, x: ValueId, target: &[usize]) -> DiffResult<ValueId> {
        let src_shape = self.shape(x).to_vec();
        if !broadcast_compatible(&src_shape, target) {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast",
                lhs: src_shape,
                rhs: target.to_vec(),
            });
        }
        let out = broadcast_forward(self.value(x), target);
        Ok(self.push(out, Op::Broadcast, vec![x]))
    }

    // ── Reductions ───────────────────────────────────────────────────────

    pub fn sum(&mut self, x: ValueId) -> DiffResult<ValueId> {
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Array::scalar(s), Op::Sum, vec![x]))
    }

    pub fn mean(&mut self, x: ValueId) -> DiffResult<ValueId> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(DiffError::Invalid("mean of empty array".into()));
        }
        let s: f64 = self.value(x).data().iter().sum::<f64>() / n as f64;
        Ok(self.push(Array::scalar(s), Op::Mean, vec![x]))
    }

    /// Log-sum-exp over the last axis: [n] -> scalar, [m, n] -> [m].
    pub fn log_sum_exp(&mut self, x: ValueId) -> DiffResult<ValueId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape.len() > 2 {
            return Err(DiffError::Invalid(format!("log_sum_exp on rank {}", shape.len())));
        }
        let n = *shape.last().unwrap();
        if n == 0 {
            return Err(DiffError::Invalid("log_sum_exp over empty axis".into()));
        }
        let rows = self.value(x).len() / n;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            out.push(log_sum_exp_slice(row));
        }
        let out_shape = if shape.len() == 1 { vec![] } else { vec![shape[0]] };
        Ok(self.push(Array::new(out_shape, out), Op::LogSumExp, vec![x]))
    }

    // ── Elementwise unary ────────────────────────────────────────────────

    pub fn exp(&mut self, x: ValueId) -> DiffResult<ValueId> {
        if let Some(&bad) = self.value(x).data().iter().find(|v| **v > EXP_MAX_ARG) {
            return Err(DiffError::Domain { op: "exp", value: bad });
        }
        let out = self.value(x).map(f64::exp);
        Ok(self.push(out, Op::Exp, vec![x]))
    }

    pub fn log(&mut self, x: ValueId) -> DiffResult<ValueId> {
        if let Some(&bad) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(DiffError::Domain { op: "log", value: bad });
        }
        let out = self.value(x).map(f64::ln);
        Ok(self.push(out, Op::Log, vec![x]))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> DiffResult<ValueId> {
        let out = self.value(x).map(stable_sigmoid);
        Ok(self.push(out, Op::Sigmoid, vec![x]))
    }

    pub fn tanh(&mut self, x: ValueId) -> DiffResult<ValueId> {
        let out = self.value(x).map(f64::tanh);
        Ok(self.push(out, Op::Tanh, vec![x]))
    }

    pub fn selu(&mut self, x: ValueId) -> DiffResult<ValueId> {
        let out = self.value(x).map(|v| {
            if v > 0.0 {
                SELU_LAMBDA * v
            } else {
                SELU_LAMBDA * SELU_ALPHA * (v.exp() - 1.0)
            }
        });
        Ok(self.push(out, Op::Selu, vec![x]))
    }

    pub fn softplus(&mut self, x: ValueId) -> DiffResult<ValueId> {
        let out = self.value(x).map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        Ok(self.push(out, Op::Softplus, vec![x]))
    }

    // ── Gradient control and gathering ──────────────────────────────────

    /// Identity forward; no gradient flows to anything behind it.
    pub fn stop_gradient(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient, vec![x])
    }

    /// From [m, n], pick element `indices[i]` of row i, yielding [m].
    pub fn one_hot_gather(&mut self, x: ValueId, indices: &[usize]) -> DiffResult<ValueId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(DiffError::Invalid(format!("one_hot_gather on rank {}", shape.len())));
        }
        let (m, n) = (shape[0], shape[1]);
        if indices.len() != m {
            return Err(DiffError::Invalid(format!(
                "one_hot_gather: {} indices for {m} rows",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(DiffError::Invalid(format!("one_hot_gather index {bad} >= {n}")));
        }
        let data = self.value(x).data();
        let out: Vec<f64> = indices.iter().enumerate().map(|(i, &j)| data[i * n + j]).collect();
        Ok(self.push(
            Array::from_vec(out),
            Op::OneHotGather { indices: indices.to_vec() },
            vec![x],
        ))
    }

    // ── Reparameterizations ──────────────────────────────────────────────

    /// Row-wise weight normalization: W[o, :] = g[o] * v[o, :] / ||v[o, :]||.
    pub fn weight_norm(&mut self, v: ValueId, g: ValueId) -> DiffResult<ValueId> {
        let sv = self.shape(v).to_vec();
        let sg = self.shape(g).to_vec();
        if sv.len() != 2 || sg != [sv[0]] {
            return Err(DiffError::ShapeMismatch { op: "weight_norm", lhs: sv, rhs: sg });
        }
        let (o, i) = (sv[0], sv[1]);
        let vd = self.value(v).data();
        let gd = self.value(g).data();
        let mut out = vec![0.0; o * i];
        for r in 0..o {
            let row = &vd[r * i..(r + 1) * i];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(DiffError::ZeroNormRow { row: r });
            }
            let scale = gd[r] / norm;
            for (dst, &x) in out[r * i..(r + 1) * i].iter_mut().zip(row) {
                *dst = scale * x;
            }
        }
        Ok(self.push(Array::new(vec![o, i], out), Op::WeightNorm, vec![v, g]))
    }

    /// W / sigma with sigma estimated from fixed direction vectors `u`, `v`
    /// (sigma = u^T W v). The power-iteration state lives outside the graph;
    /// see `diffcore::norm::spectral_norm_apply`.
    pub fn spectral_apply(&mut self, w: ValueId, u: &[f64], v: &[f64], sigma: f64) -> DiffResult<ValueId> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || u.len() != sw[0] || v.len() != sw[1] {
            return Err(DiffError::ShapeMismatch {
                op: "spectral_apply",
                lhs: sw,
                rhs: vec![u.len(), v.len()],
            });
        }
        let out = self.value(w).map(|x| x / sigma);
        Ok(self.push(
            out,
            Op::SpectralApply { u: u.to_vec(), v: v.to_vec(), sigma },
            vec![w],
        ))
    }

    // ── Composite conveniences (built from primitives) ───────────────────

    /// x * c for a scalar constant c.
    pub fn scale(&mut self, x: ValueId, c: f64) -> DiffResult<ValueId> {
        let shape = self.shape(x).to_vec();
        let cnode = self.constant_scalar(c);
        let b = self.broadcast(cnode, &shape)?;
        self.mul(x, b)
    }

    /// x + c for a scalar constant c.
    pub fn shift(&mut self, x: ValueId, c: f64) -> DiffResult<ValueId> {
        let shape = self.shape(x).to_vec();
        let cnode = self.constant_scalar(c);
        let b = self.broadcast(cnode, &shape)?;
        self.add(x, b)
    }

    /// Row-wise affine map: x[m, d] @ w[d, h] + b[h].
    pub fn affine(&mut self, x: ValueId, w: ValueId, b: ValueId) -> DiffResult<ValueId> {
        let mm = self.matmul(x, w)?;
        let shape = self.shape(mm).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(mm, bb)
    }

    pub fn square(&mut self, x: ValueId) -> DiffResult<ValueId> {
        self.mul(x, x)
    }

    /// 1 - x elementwise.
    pub fn one_minus(&mut self, x: ValueId) -> DiffResult<ValueId> {
        let ones = self.constant(Array::full(self.nodes[x.0].data.shape(), 1.0));
        self.sub(ones, x)
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Accumulate d loss / d node for every `requires_grad` node reachable
    /// from `loss`. The loss must be scalar-shaped.
    pub fn backward(&mut self, loss: ValueId) -> DiffResult<Gradients> {
        if !self.value(loss).is_scalar_shaped() {
            return Err(DiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::new(self.shape(loss).to_vec(), vec![1.0]));

        // Nodes only point backward, so reverse insertion order is a valid
        // reverse topological order.
        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires_grad {
                // Constant subgraph (or the loss itself built from constants):
                // keep the adjoint, nothing flows further back.
                grads[idx] = Some(g);
                continue;
            }
            let contribs = self.local_grads(idx, &g);
            grads[idx] = Some(g);
            for (pid, contrib) in contribs {
                if !self.nodes[pid.0].requires_grad {
                    continue;
                }
                match &mut grads[pid.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Per-parent adjoint contributions of node `idx` given its output adjoint.
    fn local_grads(&self, idx: usize, g: &Array) -> Vec<(ValueId, Array)> {
        let node = &self.nodes[idx];
        let parents = &node.parents;
        let pval = |k: usize| &self.nodes[parents[k].0].data;
        match &node.op {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Add => vec![(parents[0], g.clone()), (parents[1], g.clone())],
            Op::Sub => vec![(parents[0], g.clone()), (parents[1], g.map(|x| -x))],
            Op::Mul => vec![
                (parents[0], g.zip(pval(1), |gi, b| gi * b)),
                (parents[1], g.zip(pval(0), |gi, a| gi * a)),
            ],
            Op::MatMul { trans_b: false } => {
                let da = g.matmul_t(pval(1));
                let db = pval(0).t_matmul(g);
                vec![(parents[0], da), (parents[1], db)]
            }
            Op::MatMul { trans_b: true } => {
                // C = A B^T: dA = G B, dB = G^T A
                let da = g.matmul(pval(1));
                let db = g.t_matmul(pval(0));
                vec![(parents[0], da), (parents[1], db)]
            }
            Op::Dot => {
                let gs = g.item();
                vec![
                    (parents[0], pval(1).map(|b| gs * b)),
                    (parents[1], pval(0).map(|a| gs * a)),
                ]
            }
            Op::Concat { axis } => {
                let out_shape = node.data.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0;
                let mut result = Vec::with_capacity(parents.len());
                for &p in parents {
                    let pshape = self.nodes[p.0].data.shape().to_vec();
                    let s_axis = pshape[*axis];
                    let mut part = vec![0.0; pshape.iter().product()];
                    for o in 0..outer {
                        let src_start = (o * total_axis + offset) * inner;
                        let dst_start = o * s_axis * inner;
                        part[dst_start..dst_start + s_axis * inner]
                            .copy_from_slice(&g.data()[src_start..src_start + s_axis * inner]);
                    }
                    result.push((p, Array::new(pshape, part)));
                    offset += s_axis;
                }
                result
            }
            Op::Slice { axis, start } => {
                let pshape = pval(0).shape().to_vec();
                let outer: usize = pshape[..*axis].iter().product();
                let inner: usize = pshape[*axis + 1..].iter().product();
                let take = node.data.shape()[*axis];
                let mut full = vec![0.0; pshape.iter().product()];
                for o in 0..outer {
                    let dst_start = (o * pshape[*axis] + start) * inner;
                    let src_start = o * take * inner;
                    full[dst_start..dst_start + take * inner]
                        .copy_from_slice(&g.data()[src_start..src_start + take * inner]);
                }
                vec![(parents[0], Array::new(pshape, full))]
            }
            Op::Broadcast => {
                vec![(parents[0], broadcast_backward(g, pval(0).shape()))]
            }
            Op::Sum => {
                let gs = g.item();
                vec![(parents[0], Array::full(pval(0).shape(), gs))]
            }
            Op::Mean => {
                let n = pval(0).len() as f64;
                let gs = g.item() / n;
                vec![(parents[0], Array::full(pval(0).shape(), gs))]
            }
            Op::Exp => vec![(parents[0], g.zip(&node.data, |gi, y| gi * y))],
            Op::Log => vec![(parents[0], g.zip(pval(0), |gi, x| gi / x))],
            Op::Sigmoid => vec![(parents[0], g.zip(&node.data, |gi, y| gi * y * (1.0 - y)))],
            Op::Tanh => vec![(parents[0], g.zip(&node.data, |gi, y| gi * (1.0 - y * y)))],
            Op::Selu => vec![(parents[0], g.zip(pval(0), |gi, x| {
                if x > 0.0 {
                    gi * SELU_LAMBDA
                } else {
                    gi * SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            }))],
            Op::Softplus => vec![(parents[0], g.zip(pval(0), |gi, x| gi * stable_sigmoid(x)))],
            Op::LogSumExp => {
                let x = pval(0);
                let n = *x.shape().last().unwrap();
                let rows = x.len() / n;
                let mut dx = vec![0.0; x.len()];
                for r in 0..rows {
                    let gr = g.data()[r];
                    let lse = node.data.data()[r];
                    for j in 0..n {
                        dx[r * n + j] = gr * (x.data()[r * n + j] - lse).exp();
                    }
                }
                vec![(parents[0], Array::new(x.shape().to_vec(), dx))]
            }
            Op::OneHotGather { indices } => {
                let pshape = pval(0).shape().to_vec();
                let n = pshape[1];
                let mut dx = vec![0.0; pshape.iter().product()];
                for (i, &j) in indices.iter().enumerate() {
                    dx[i * n + j] = g.data()[i];
                }
                vec![(parents[0], Array::new(pshape, dx))]
            }
            Op::WeightNorm => {
                let v = pval(0);
                let gp = pval(1);
                let (o, i) = v.dims2();
                let mut dv = vec![0.0; o * i];
                let mut dg = vec![0.0; o];
                for r in 0..o {
                    let vrow = &v.data()[r * i..(r + 1) * i];
                    let grow = &g.data()[r * i..(r + 1) * i];
                    let norm = vrow.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let gout_dot_u: f64 = grow
                        .iter()
                        .zip(vrow)
                        .map(|(&gi, &vi)| gi * vi / norm)
                        .sum();
                    dg[r] = gout_dot_u;
                    let gv = gp.data()[r];
                    for k in 0..i {
                        let u_k = vrow[k] / norm;
                        dv[r * i + k] = gv / norm * (grow[k] - u_k * gout_dot_u);
                    }
                }
                vec![
                    (parents[0], Array::new(vec![o, i], dv)),
                    (parents[1], Array::from_vec(dg)),
                ]
            }
            Op::SpectralApply { u, v, sigma } => {
                let w = pval(0);
                let (m, n) = w.dims2();
                // d(W/sigma)/dW with sigma = u^T W v and u, v held fixed:
                // dW = G/sigma - (sum G .* W / sigma^2) u v^T
                let gw_dot: f64 = g.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
                let coeff = gw_dot / (sigma * sigma);
                let mut dw = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        dw[r * n + c] = g.data()[r * n + c] / sigma - coeff * u[r] * v[c];
                    }
                }
                vec![(parents[0], Array::new(vec![m, n], dw))]
            }
        }
    }
}

fn broadcast_compatible(src: &[usize], target: &[usize]) -> bool {
    if src.len() > target.len() || target.len() > 3 {
        return false;
    }
    let offset = target.len() - src.len();
    src.iter()
        .enumerate()
        .all(|(i, &d)| d == target[offset + i] || d == 1)
}

fn broadcast_forward(x: &Array, target: &[usize]) -> Array {
    // Pad source shape on the left to the target rank, then expand.
    let mut src_shape = vec![1; target.len() - x.rank()];
    src_shape.extend_from_slice(x.shape());
    let mut out = vec![0.0; target.iter().product()];
    let src = x.data();
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src_idx = 0;
        for d in 0..target.len() {
            let stride: usize = target[d + 1..].iter().product();
            let i = rem / stride;
            rem %= stride;
            let si = if src_shape[d] == 1 { 0 } else { i };
            let src_stride: usize = src_shape[d + 1..].iter().product();
            src_idx += si * src_stride;
        }
        *slot = src[src_idx];
    }
    Array::new(target.to_vec(), out)
}

fn broadcast_backward(g: &Array, src_shape: &[usize]) -> Array {
    let target = g.shape();
    let mut padded = vec![1; target.len() - src_shape.len()];
    padded.extend_from_slice(src_shape);
    let mut out = vec![0.0; src_shape.iter().product::<usize>().max(1)];
    for (flat, &gv) in g.data().iter().enumerate() {
        let mut rem = flat;
        let mut src_idx = 0;
        for d in 0..target.len() {
            let stride: usize = target[d + 1..].iter().product();
            let i = rem / stride;
            rem %= stride;
            let si = if padded[d] == 1 { 0 } else { i };
            let src_stride: usize = padded[d + 1..].iter().product();
            src_idx += si * src_stride;
        }
        out[src_idx] += gv;
    }
    Array::new(src_shape.to_vec(), out)
}

pub(crate) fn log_sum_exp_slice(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
