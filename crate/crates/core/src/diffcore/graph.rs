use super::array::Array;
use super::ops::Op;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Array,
    pub(crate) requires_grad: bool,
}

/// Append-only record of array operations.
///
/// Nodes are stored in creation order, which is a topological order because an
/// op can only reference nodes that already exist. `backward` walks the list in
/// reverse.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
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

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Array) -> Result<NodeId> {
        self.push(Op::Leaf, value, false, "constant")
    }

    /// Leaf that receives a gradient.
    pub fn parameter(&mut self, value: Array) -> Result<NodeId> {
        self.push(Op::Leaf, value, true, "parameter")
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.value(id)
            .item()
            .ok_or_else(|| Error::Usage(format!("node {} is not a scalar", id.0)))
    }

    pub(crate) fn push(
        &mut self,
        op: Op,
        value: Array,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = requires_grad || op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar node.
    ///
    /// Gradients from multiple consumers are summed. Nodes with `requires_grad`
    /// that have no path to `loss` report an all-zero gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                let mut sink = GradSink {
                    nodes: &self.nodes,
                    grads: &mut grads[..idx],
                };
                node.op.backward(&node.value, &upstream, &mut sink);
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}

/// Accumulates input gradients during the reverse pass.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    pub(crate) fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub(crate) fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Runs `f` on the gradient buffer of `id`, allocating zeros on first use.
    /// Skipped entirely for nodes that do not need a gradient.
    pub(crate) fn add(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let len = self.nodes[id.0].value.len();
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros if no path reached it.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Array {
        let value = graph.value(id);
        match self.grads.get(id.0).and_then(Option::as_ref) {
            Some(g) => Array::new(value.shape().to_vec(), g.clone()).expect("gradient shape"),
            None => Array::zeros(value.shape()),
        }
    }

    /// Whether any gradient flowed into `id`.
    pub fn reached(&self, id: NodeId) -> bool {
        self.grads.get(id.0).is_some_and(Option::is_some)
    }
}
