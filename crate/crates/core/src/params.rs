//! Named parameter collections: the unit exchanged between clients and server.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::Tensor;

/// Ordered, named collection of tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Contract(alloc::format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(alloc::format!("missing parameter `{name}`")))
    }

    /// Replaces the value of an existing parameter, keeping its position.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Contract(alloc::format!("missing parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("ParamSet::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names in the same order with the same shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            let missing = self
                .names()
                .find(|n| other.get(n).is_none())
                .or_else(|| other.names().find(|n| self.get(n).is_none()))
                .unwrap_or("<count>");
            return Err(Error::Aggregation {
                key: missing.to_string(),
                reason: alloc::format!("parameter count {} vs {}", self.len(), other.len()),
            });
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(Error::Aggregation {
                    key: na.to_string(),
                    reason: alloc::format!("expected key `{na}`, found `{nb}`"),
                });
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Aggregation {
                    key: na.to_string(),
                    reason: alloc::format!("shape {:?} vs {:?}", ta.shape(), tb.shape()),
                });
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> ParamSet {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.map(|v| c * v))).collect(),
        }
    }

    /// Places every parameter on `g`; names accepted by `trainable` become
    /// variables, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|(n, t)| {
                if trainable(n) {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            ids,
        }
    }
}

/// Parameter names mapped to graph nodes.
#[derive(Debug, Clone)]
pub struct Bound {
    names: Vec<String>,
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.ids[i])
            .ok_or_else(|| Error::Contract(alloc::format!("missing parameter `{name}`")))
    }

    /// Gradient per parameter in binding order; `None` where no gradient reached it.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.ids.iter().map(|&id| grads.take(id)).collect()
    }
}
