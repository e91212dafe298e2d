//! Reverse-mode differentiation over a fixed set of tensor operations.
//!
//! A [`Graph`] is built eagerly: each method computes its value immediately
//! and records the operation. [`Graph::backward`] then walks the nodes in
//! reverse creation order, which is a valid topological order because a node
//! can only reference nodes created before it.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Operation kinds, used to name a backward rule for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Scale,
    MulScalar,
    Transpose,
    ConcatRows,
    SliceRows,
    Reshape,
    SoftmaxRows,
    Tanh,
    Mean,
    SquaredError,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Scale,
        OpKind::MulScalar,
        OpKind::Transpose,
        OpKind::ConcatRows,
        OpKind::SliceRows,
        OpKind::Reshape,
        OpKind::SoftmaxRows,
        OpKind::Tanh,
        OpKind::Mean,
        OpKind::SquaredError,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Scale => "scale",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Transpose => "transpose",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::Reshape => "reshape",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::Tanh => "tanh",
            OpKind::Mean => "mean",
            OpKind::SquaredError => "squared_error",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown op kind {s:?}")))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    MulScalar { x: NodeId, s: NodeId },
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    Reshape(NodeId),
    SoftmaxRows(NodeId),
    Tanh(NodeId),
    Mean(NodeId),
    SquaredError(NodeId, NodeId),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::MulScalar { .. } => OpKind::MulScalar,
            Op::Transpose(..) => OpKind::Transpose,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Mean(..) => OpKind::Mean,
            Op::SquaredError(..) => OpKind::SquaredError,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Corrupts one backward rule by a constant factor. Exists so gradient
/// checks can be shown to fail when a rule is wrong.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    pub factor: f64,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    fault: Option<BackwardFault>,
}

/// Gradients of a scalar with respect to every node that influenced it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.grads[node.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, n: NodeId) -> &Tensor {
        &self.nodes[n.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls for the same id return
    /// the same node, so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes.get(&id) {
            return *n;
        }
        let n = self.push(store.value(id).clone(), Op::Leaf);
        self.nodes[n.0].param = Some(id);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).scale(factor);
        self.push(v, Op::Scale(a, factor))
    }

    /// `s * x` where `s` is a 1x1 node.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let factor = self.value(s).item()?;
        let v = self.value(x).scale(factor);
        Ok(self.push(v, Op::MulScalar { x, s }))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&values)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows { x, start }))
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.value(x).reshape(rows, cols)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).softmax_rows();
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).tanh();
        self.push(v, Op::Tanh(x))
    }

    /// Mean of all elements, as a 1x1 node.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x))
    }

    /// Mean of squared elementwise differences, as a 1x1 node.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let diff = self.value(a).sub(self.value(b))?;
        let v = Tensor::scalar(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64);
        Ok(self.push(v, Op::SquaredError(a, b)))
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let factor = match (self.fault, node.op.kind()) {
                (Some(f), Some(k)) if f.op == k => f.factor,
                _ => 1.0,
            };
            let g = if factor == 1.0 { upstream.clone() } else { upstream.scale(factor) };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut acc = |n: NodeId, delta: Tensor| -> Result<()> {
            match &mut grads[n.0] {
                Some(existing) => *existing = existing.add(&delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul(&self.value(*b).transpose())?)?;
                acc(*b, self.value(*a).transpose().matmul(g)?)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Scale(a, factor) => acc(*a, g.scale(*factor))?,
            Op::MulScalar { x, s } => {
                let factor = self.value(*s).item()?;
                acc(*x, g.scale(factor))?;
                let ds = g.hadamard(self.value(*x))?.sum();
                acc(*s, Tensor::scalar(ds))?;
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    acc(*p, g.slice_rows(start, rows)?)?;
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let mut full = Tensor::zeros(src.rows(), src.cols());
                let cols = src.cols();
                full.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                acc(*x, full)?;
            }
            Op::Reshape(x) => {
                let (r, c) = self.value(*x).shape();
                acc(*x, g.reshape(r, c)?)?;
            }
            Op::SoftmaxRows(x) => {
                // dx = y * (g - rowsum(g * y))
                let cols = out.cols();
                let mut dx = Tensor::zeros(out.rows(), cols);
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx.set(r, c, y[c] * (gr[c] - inner));
                    }
                }
                acc(*x, dx)?;
            }
            Op::Tanh(x) => {
                let local = out.map(|y| 1.0 - y * y);
                acc(*x, g.hadamard(&local)?)?;
            }
            Op::Mean(x) => {
                let src = self.value(*x);
                let upstream = g.item()?;
                acc(*x, Tensor::full(src.rows(), src.cols(), upstream / src.len() as f64))?;
            }
            Op::SquaredError(a, b) => {
                let diff = self.value(*a).sub(self.value(*b))?;
                let k = 2.0 * g.item()? / diff.len() as f64;
                let da = diff.scale(k);
                acc(*b, da.scale(-1.0))?;
                acc(*a, da)?;
            }
        }
        Ok(())
    }

    /// Adds gradients into every trainable parameter bound in this graph.
    /// Frozen parameters' gradients are left untouched.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (id, node) in &self.param_nodes {
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.wrt(*node) {
                p.grad = p.grad.add(g)?;
            }
        }
        Ok(())
    }

    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        self.accumulate_into(&grads, store)
    }
}
