use crate::tensor::{Result, Tensor, TensorError};

use super::ops::{self, Op, OpKind};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Default floor applied inside `log`.
pub const LOG_FLOOR: f64 = 1e-12;

/// A reverse-mode tape.
///
/// Nodes are appended in evaluation order, so node ids are a topological
/// order of the recorded computation. A graph is a single-threaded unit of
/// work; independent graphs share nothing.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) log_floor: Option<f64>,
    faults: Vec<(OpKind, f64)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            log_floor: Some(LOG_FLOOR),
            faults: Vec::new(),
        }
    }

    /// Sets the floor used by `log`. `None` turns non-positive arguments into
    /// domain errors instead of clamping them.
    pub fn set_log_floor(&mut self, floor: Option<f64>) {
        self.log_floor = floor;
    }

    /// Scales every gradient produced by the backward rule of `kind` by
    /// `factor`. Forward values are untouched, so a gradient check against
    /// finite differences must catch the corruption.
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.faults.push((kind, factor));
    }

    /// A differentiable leaf (parameter or input that receives a gradient).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node reachable from `loss` that depends on a differentiable leaf
    /// gets its gradient; contributions from multiple uses accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| TensorError::InvalidArgument("loss is not on this tape".into()))?;
        if !loss_node.value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut done: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if loss_node.requires_grad {
            pending[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let factor: f64 = self
                .faults
                .iter()
                .filter(|(k, _)| *k == node.op.kind())
                .map(|(_, f)| f)
                .product();
            for (input, mut contrib) in ops::backward_rule(self, id, &grad) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if factor != 1.0 {
                    contrib.iter_mut().for_each(|c| *c *= factor);
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            done[id] = Some(Tensor::new(node.value.shape(), grad)?);
        }
        Ok(Gradients { grads: done })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
