//! Named parameter storage shared by models, optimizers, and checkpoints.
//!
//! Model structs hold [`ParamId`] handles into one [`ParamSet`] owned by the
//! training run. Forward passes bind parameters onto a fresh [`crate::numerics::Tape`]
//! each call, so the set itself stays plain data: flat `f64` buffers plus a
//! trainable flag that the freezing contract flips off.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Handle to one parameter in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

/// All persistent numeric state of a model: weights, biases, BN affines and
/// running statistics, and learnable scalars.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique within the set.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
        trainable: bool,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name}: shape {shape:?} does not match {} values",
            data.len()
        );
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            shape,
            data,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Iterate entries in insertion order (the order is part of checkpoint
    /// byte stability).
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of scalar values across the given parameters.
    pub fn count_values(&self, ids: impl IntoIterator<Item = ParamId>) -> usize {
        ids.into_iter().map(|id| self.data(id).len()).sum()
    }

    /// Number of trainable scalar values in the whole set.
    pub fn trainable_value_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.data.len())
            .sum()
    }

    /// Overwrite a parameter's values, keeping shape.
    pub fn assign(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.data.len() != values.len() {
            return Err(Error::dimension(
                "assign",
                format!("{} values", entry.data.len()),
                format!("{} values", values.len()),
            ));
        }
        entry.data.copy_from_slice(values);
        Ok(())
    }
}

/// Row-major uniform draw on (-scale/sqrt(rows), scale/sqrt(rows)); rows is
/// the fan-in of an x.W product.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    let bound = scale / (rows as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// SHA-256 digest over the given parameters' raw bytes, in id order.
/// Used by the freezing contract to prove backbone bit-equality.
pub fn checksum(params: &ParamSet, ids: impl IntoIterator<Item = ParamId>) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for id in ids {
        let entry = params.entry(id);
        hasher.update(entry.name.as_bytes());
        for &v in &entry.data {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_and_lookup() {
        let mut params = ParamSet::new();
        let id = params.insert("w", vec![2, 3], vec![0.0; 6], true);
        assert_eq!(params.lookup("w"), Some(id));
        assert_eq!(params.shape(id), &[2, 3]);
        assert!(params.is_trainable(id));
    }

    #[test]
    fn checksum_changes_with_values() {
        let mut params = ParamSet::new();
        let id = params.insert("w", vec![2], vec![1.0, 2.0], true);
        let before = checksum(&params, [id]);
        params.data_mut(id)[0] = 1.5;
        let after = checksum(&params, [id]);
        assert_ne!(before, after);
    }

    #[test]
    fn trainable_value_count_ignores_frozen() {
        let mut params = ParamSet::new();
        params.insert("a", vec![4], vec![0.0; 4], true);
        params.insert("b", vec![3], vec![0.0; 3], false);
        assert_eq!(params.trainable_value_count(), 4);
    }
}
