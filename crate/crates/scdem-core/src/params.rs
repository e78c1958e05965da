use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScdemError};
use crate::tensor::Tensor;

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_set_id() -> u64 {
    NEXT_SET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered, uniquely-named collection of parameter tensors.
///
/// Iteration order is insertion order, which keeps every downstream
/// consumer (optimizer, serialization, hashing) deterministic.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    /// Process-local identity used by graph binding caches; never serialized.
    #[serde(skip, default = "fresh_set_id")]
    set_id: u64,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        // A clone is a distinct parameter store (e.g. a snapshot) and must
        // not share the binding identity of its source.
        let mut out = ParamSet::new();
        out.entries = self.entries.clone();
        out.rebuild_index();
        out
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
            set_id: fresh_set_id(),
        }
    }

    pub(crate) fn set_id(&self) -> u64 {
        self.set_id
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ScdemError::Config(format!("duplicate parameter name {name}")));
        }
        tensor.requires_grad = trainable;
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        match self.index.get(name) {
            Some(&i) => Some(&mut self.entries[i]),
            None => None,
        }
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    /// Marks every entry non-trainable (freeze contract).
    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
            e.tensor.requires_grad = false;
            e.tensor.grad = None;
        }
    }

    /// Flips trainability of one entry by name.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let e = self
            .get_mut(name)
            .ok_or_else(|| ScdemError::Config(format!("unknown parameter {name}")))?;
        e.trainable = trainable;
        e.tensor.requires_grad = trainable;
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Order-sensitive bit hash over all parameter values.
    pub fn bit_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for e in &self.entries {
            h ^= e.tensor.bit_hash();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Restores the name index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        self.set_id = fresh_set_id();
    }
}

/// Glorot-uniform initialization for an affine weight matrix.
pub fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], values).expect("glorot shape")
}
