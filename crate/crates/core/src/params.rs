//! Named parameter storage shared by every trainable component.

use crate::autograd::Gradients;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    /// Rows of this matrix are subject to the max-norm constraint.
    constrained: bool,
}

/// An ordered collection of named tensors.
///
/// The `version` counter changes on every mutable access, which lets caches
/// keyed on parameter values detect staleness.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, constrained: bool) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(Entry {
            name,
            tensor,
            constrained,
        });
        self.version += 1;
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.version += 1;
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn is_constrained(&self, id: ParamId) -> bool {
        self.entries[id.0].constrained
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Adds `scale * grad` into each touched parameter's gradient slot.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.params() {
            self.entries[id.0].tensor.accumulate_grad(g, scale);
        }
    }

    /// Largest row norm over max-norm constrained matrices.
    pub fn max_constrained_row_norm(&self) -> f64 {
        let mut best: f64 = 0.0;
        for id in self.ids() {
            if !self.is_constrained(id) {
                continue;
            }
            let t = self.get(id);
            for r in 0..t.rows() {
                best = best.max(t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
        best
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for d in e.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// SHA-256 of one tensor's shape and values.
pub fn tensor_checksum(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
