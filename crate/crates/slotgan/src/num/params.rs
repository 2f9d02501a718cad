//! Named parameter storage with gradient slots.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::tape::{NodeId, NumResult, Tape};
use super::tensor::Tensor;
use super::NumError;

/// One trainable (or frozen) tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

/// Flat store of all parameters of one model, keyed by name.
///
/// Iteration order is insertion order, which keeps optimizer updates and
/// checkpoints deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {}",
            name
        );
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            value,
            grad,
            frozen: false,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn idx(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.entries[*self.index.get(name).unwrap_or_else(|| {
            panic!("unknown parameter {}", name);
        })]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = *self.index.get(name).unwrap_or_else(|| {
            panic!("unknown parameter {}", name);
        });
        &mut self.entries[i]
    }

    pub fn by_idx(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn by_idx_mut(&mut self, i: usize) -> &mut Param {
        &mut self.entries[i]
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        self.get_mut(name).frozen = frozen;
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        for p in self.entries.iter_mut() {
            p.frozen = frozen;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.iter_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for p in self.entries.iter_mut() {
            p.grad.scale_assign(c);
        }
    }

    /// Digest of all parameter values; handy for checking that an operation
    /// left the model untouched.
    pub fn value_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// One forward pass over a store: lazily binds parameters onto a fresh tape
/// and routes gradients back after `backprop`.
pub struct Session {
    pub tape: Tape,
    bound: Vec<(usize, NodeId)>,
    seen: HashMap<usize, NodeId>,
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Session {
    pub fn new() -> Self {
        Session {
            tape: Tape::new(),
            bound: Vec::new(),
            seen: HashMap::new(),
        }
    }

    /// Node for a named parameter; the same node is reused within a session.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        let idx = store
            .idx(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name));
        if let Some(&id) = self.seen.get(&idx) {
            return id;
        }
        let id = self.tape.leaf(store.by_idx(idx).value.clone());
        self.seen.insert(idx, id);
        self.bound.push((idx, id));
        id
    }

    /// A constant input (no gradient routing).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.tape.leaf(t)
    }

    /// Run the reverse sweep from `loss` and accumulate parameter gradients
    /// into the store. Returns the loss value.
    pub fn backprop(&mut self, loss: NodeId, store: &mut ParamStore) -> NumResult<f64> {
        let value = self.tape.value(loss).item();
        let grads = self.tape.backward(loss)?;
        for &(idx, node) in &self.bound {
            if store.by_idx(idx).frozen {
                continue;
            }
            if let Some(g) = &grads[node.0] {
                store.by_idx_mut(idx).grad.add_assign(g);
            }
        }
        Ok(value)
    }
}

/// Elementwise check that every accumulated gradient is finite.
pub fn check_grads_finite(store: &ParamStore) -> NumResult<()> {
    for p in store.iter() {
        if !p.grad.is_finite() {
            return Err(NumError::NonFiniteGrad(p.name.clone()));
        }
    }
    Ok(())
}
