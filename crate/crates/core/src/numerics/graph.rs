//! Tape-based reverse-mode differentiation over the tensor kernels.
//!
//! Nodes are appended in evaluation order, so the tape is acyclic by
//! construction. Leaves are either constant inputs or trainable parameters;
//! gradients flow only along edges that lead back to a parameter.

use std::collections::BTreeMap;

use super::tensor::{self, Tensor};
use super::NumericsError;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    RowSoftmax(NodeId),
    Relu(NodeId),
    MeanPool(NodeId),
    CrossEntropy(NodeId, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a root with respect to every parameter leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<(), NumericsError> {
        if id < self.nodes.len() {
            Ok(())
        } else {
            Err(NumericsError::Contract(format!("unknown node {id}")))
        }
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Param, t, true)
    }

    pub fn op(&self, id: NodeId) -> Op {
        self.nodes[id].op
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Ids of all trainable leaves, in creation order.
    pub fn params(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].op == Op::Param).collect()
    }

    fn eval(&self, op: Op) -> Result<Tensor, NumericsError> {
        let v = |i: NodeId| &self.nodes[i].value;
        match op {
            Op::Input | Op::Param => Err(NumericsError::Contract("leaves are not evaluated".into())),
            Op::MatMul(a, b) => tensor::matmul(v(a), v(b)),
            Op::MatMulNT(a, b) => tensor::matmul_nt(v(a), v(b)),
            Op::Add(a, b) => tensor::add(v(a), v(b)),
            Op::Scale(a, c) => tensor::scale(v(a), c),
            Op::RowSoftmax(a) => tensor::row_softmax(v(a)),
            Op::Relu(a) => tensor::relu(v(a)),
            Op::MeanPool(a) => tensor::mean_pool(v(a)),
            Op::CrossEntropy(a, label) => tensor::cross_entropy(v(a), label),
        }
    }

    fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, NumericsError> {
        for &i in inputs {
            self.check(i)?;
        }
        let value = self.eval(op)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(op, value, needs_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.apply(Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.apply(Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.apply(Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumericsError> {
        if !c.is_finite() {
            return Err(NumericsError::NonFinite("scale factor".into()));
        }
        self.apply(Op::Scale(a, c), &[a])
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.apply(Op::RowSoftmax(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.apply(Op::Relu(a), &[a])
    }

    pub fn mean_pool(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.apply(Op::MeanPool(a), &[a])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId, NumericsError> {
        self.apply(Op::CrossEntropy(logits, label), &[logits])
    }

    /// Replaces the value of a leaf. Call [`Graph::recompute`] afterwards to
    /// refresh the nodes that depend on it.
    pub fn set_value(&mut self, id: NodeId, t: Tensor) -> Result<(), NumericsError> {
        self.check(id)?;
        let node = &mut self.nodes[id];
        if !matches!(node.op, Op::Input | Op::Param) {
            return Err(NumericsError::Contract(format!("node {id} is not a leaf")));
        }
        if node.value.shape() != t.shape() {
            return Err(NumericsError::Dimension(format!(
                "leaf {id}: {:?} replaced by {:?}",
                node.value.shape(),
                t.shape()
            )));
        }
        node.value = t;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in tape order.
    pub fn recompute(&mut self) -> Result<(), NumericsError> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op;
            if !matches!(op, Op::Input | Op::Param) {
                self.nodes[i].value = self.eval(op)?;
            }
        }
        Ok(())
    }

    /// Gradients of the scalar `root` with respect to every parameter leaf.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, NumericsError> {
        self.check(root)?;
        if self.nodes[root].value.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::from_parts(1, 1, vec![1.0]).reshape(self.nodes[root].value.shape().to_vec())?);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if node.op == Op::Param {
                grads[id] = Some(g);
                continue;
            }
            let wants = |i: NodeId| self.nodes[i].needs_grad;
            let v = |i: NodeId| &self.nodes[i].value;
            let send = |grads: &mut Vec<Option<Tensor>>, i: NodeId, t: Tensor| -> Result<(), NumericsError> {
                grads[i] = Some(match grads[i].take() {
                    Some(acc) => tensor::add(&acc, &t)?,
                    None => t,
                });
                Ok(())
            };
            match node.op {
                Op::Input | Op::Param => {}
                Op::MatMul(a, b) => {
                    if wants(a) {
                        send(&mut grads, a, tensor::matmul_nt(&g, v(b))?)?;
                    }
                    if wants(b) {
                        send(&mut grads, b, tensor::matmul_tn(v(a), &g)?)?;
                    }
                }
                Op::MatMulNT(a, b) => {
                    if wants(a) {
                        send(&mut grads, a, tensor::matmul(&g, v(b))?)?;
                    }
                    if wants(b) {
                        send(&mut grads, b, tensor::matmul_tn(&g, v(a))?)?;
                    }
                }
                Op::Add(a, b) => {
                    if wants(a) {
                        send(&mut grads, a, g.clone())?;
                    }
                    if wants(b) {
                        send(&mut grads, b, g)?;
                    }
                }
                Op::Scale(a, c) => send(&mut grads, a, tensor::scale(&g, c)?)?,
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(&mut grads, a, Tensor::from_parts(m, n, out))?;
                }
                Op::Relu(a) => {
                    let x = v(a);
                    let data = x.data().iter().zip(g.data()).map(|(&x, &d)| if x > 0.0 { d } else { 0.0 }).collect();
                    send(&mut grads, a, Tensor::new(x.shape().to_vec(), data)?)?;
                }
                Op::MeanPool(a) => {
                    let (m, n) = (v(a).rows(), v(a).cols());
                    let inv = 1.0 / m as f64;
                    let row: Vec<f64> = g.data().iter().map(|d| d * inv).collect();
                    let mut out = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        out.extend_from_slice(&row);
                    }
                    send(&mut grads, a, Tensor::from_parts(m, n, out))?;
                }
                Op::CrossEntropy(a, label) => {
                    let logits = v(a);
                    let p = tensor::row_softmax(logits)?;
                    let up = g.item();
                    let mut data = p.into_data();
                    data[label] -= 1.0;
                    for d in data.iter_mut() {
                        *d *= up;
                    }
                    send(&mut grads, a, Tensor::new(logits.shape().to_vec(), data)?)?;
                }
            }
        }

        let mut out = Gradients::default();
        for (id, node) in self.nodes.iter().enumerate().take(root + 1) {
            if node.op == Op::Param {
                let g = grads[id].take().unwrap_or_else(|| Tensor::zeros_like(&node.value));
                out.grads.insert(id, g);
            }
        }
        for (id, node) in self.nodes.iter().enumerate().skip(root + 1) {
            if node.op == Op::Param {
                out.grads.insert(id, Tensor::zeros_like(&node.value));
            }
        }
        Ok(out)
    }
}

impl Tensor {
    pub fn zeros_like(t: &Tensor) -> Tensor {
        Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("shape of a valid tensor")
    }
}

/// Central differences of `root` with respect to every entry of leaf `p`.
pub fn finite_diff(g: &Graph, root: NodeId, p: NodeId, eps: f64) -> Result<Tensor, NumericsError> {
    if !(eps > 0.0) {
        return Err(NumericsError::Contract("eps must be positive".into()));
    }
    let mut work = g.clone();
    let base = g.value(p).clone();
    let mut out = vec![0.0; base.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut plus = base.clone();
        plus.data_mut()[i] += eps;
        work.set_value(p, plus)?;
        work.recompute()?;
        let fp = work.value(root).item();
        let mut minus = base.clone();
        minus.data_mut()[i] -= eps;
        work.set_value(p, minus)?;
        work.recompute()?;
        let fm = work.value(root).item();
        *o = (fp - fm) / (2.0 * eps);
    }
    Tensor::new(base.shape().to_vec(), out)
}
