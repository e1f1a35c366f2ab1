//! Named parameter storage.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named trainable tensors. Insertion order is the
/// serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        let tensor = if tensor.requires_grad() {
            tensor
        } else {
            tensor.with_grad()
        };
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of trainable scalars. Aliased parameters are stored once
    /// and therefore counted once.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Per-group element counts, grouping on the name up to the last `.`
    /// separated component that identifies a sub-block (see [`param_group`]).
    pub fn group_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (_, name, t) in self.iter() {
            *out.entry(param_group(name)).or_insert(0) += t.numel();
        }
        out
    }
}

/// Group key for reporting: `enc.layer0.text.attn.wq` → `enc.layer0.text`,
/// `enc.embed` → `enc.embed`, `dec.generator.w` → `dec.generator`.
pub fn param_group(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let depth = if parts.get(1).is_some_and(|p| p.starts_with("layer")) {
        3
    } else {
        2
    };
    parts[..depth.min(parts.len())].join(".")
}
