//! Flat, ordered storage for every model array.
//!
//! Entries keep their declaration order, which is also the order they are
//! serialized in checkpoints and visited by the optimizer.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Gradients, Graph, NodeId, RunningStats};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Learnable, updated by the optimizer.
    Weight,
    /// Running statistic, updated outside the gradient path.
    Stat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub value: Array,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, role: Role, value: Array) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            role,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of learnable scalars.
    pub fn weight_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.role == Role::Weight)
            .map(|p| p.value.len())
            .sum()
    }

    /// Running statistics stored as a `(mean, var)` pair of entries.
    pub fn running_stats(&self, mean: ParamId, var: ParamId) -> RunningStats {
        RunningStats {
            mean: self.get(mean).data().to_vec(),
            var: self.get(var).data().to_vec(),
        }
    }

    /// `(name, value)` of every weight, in store order.
    pub fn weights(&self) -> Vec<(String, Array)> {
        self.entries
            .iter()
            .filter(|p| p.role == Role::Weight)
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Like [`ParamStore::bind`], but weights use the given nodes, in store order.
    pub fn bind_with(&self, graph: &mut Graph, weights: &[NodeId]) -> Result<Bound> {
        let mut supplied = weights.iter();
        let mut nodes = Vec::with_capacity(self.entries.len());
        for p in &self.entries {
            let node = match p.role {
                Role::Weight => *supplied
                    .next()
                    .ok_or_else(|| Error::Usage("bind_with: too few weight nodes".into()))?,
                Role::Stat => graph.constant(p.value.clone())?,
            };
            nodes.push(node);
        }
        if supplied.next().is_some() {
            return Err(Error::Usage("bind_with: too many weight nodes".into()));
        }
        Ok(Bound { nodes })
    }

    /// Records every entry on `graph`. Weights become gradient-tracked leaves
    /// when `track` is set; everything else is a constant.
    pub fn bind(&self, graph: &mut Graph, track: bool) -> Result<Bound> {
        let nodes = self
            .entries
            .iter()
            .map(|p| {
                if track && p.role == Role::Weight {
                    graph.parameter(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { nodes })
    }
}

/// Graph nodes for every store entry, indexed by [`ParamId`].
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    /// Gradients for every store entry, in store order (zeros where untracked).
    pub fn gradients(&self, graph: &Graph, grads: &Gradients) -> Vec<Array> {
        self.nodes.iter().map(|n| grads.wrt(graph, *n)).collect()
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = NodeId;

    fn index(&self, id: ParamId) -> &NodeId {
        &self.nodes[id.0]
    }
}
