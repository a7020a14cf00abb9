//! Named parameter storage.
//!
//! Parameters live outside any tape; each training step stages them onto a
//! fresh tape as tracked leaves. Entries keep their insertion order, which
//! fixes the staging order, the optimizer update order and the checkpoint
//! layout, so runs are reproducible bit for bit.

use std::collections::BTreeMap;

use super::{numel, Result, Tape, TensorError, TensorRef};
use crate::scalar::Scalar;

#[derive(Clone)]
pub struct ParamEntry<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<S>,
}

#[derive(Clone)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<S>) -> Result<()> {
        if values.len() != numel(shape) {
            return Err(TensorError::Invalid {
                op: "param_add",
                msg: format!("{name}: {} values for shape {shape:?}", values.len()),
            });
        }
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid {
                op: "param_add",
                msg: format!("duplicate parameter {name}"),
            });
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<S>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn values_mut(&mut self, i: usize) -> &mut Vec<S> {
        &mut self.entries[i].values
    }

    /// Replace the values of an existing entry (shape must match).
    pub fn set(&mut self, name: &str, values: Vec<S>) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| TensorError::Invalid {
            op: "param_set",
            msg: format!("unknown parameter {name}"),
        })?;
        if values.len() != self.entries[i].values.len() {
            return Err(TensorError::Invalid {
                op: "param_set",
                msg: format!("{name}: length mismatch"),
            });
        }
        self.entries[i].values = values;
        Ok(())
    }

    /// Push every parameter onto `tape` as a tracked leaf, in storage order.
    pub fn stage(&self, tape: &mut Tape<S>) -> Result<Staged> {
        let mut refs = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            refs.push(tape.leaf(&e.shape, e.values.clone())?);
        }
        Ok(Staged {
            refs,
            index: self.index.clone(),
        })
    }

    /// Pair existing tape handles with this store's name index. For tests
    /// that route parameters through some other staging path (for example a
    /// gradient checker that owns the leaves) but still need name lookup.
    pub fn stage_refs(&self, refs: Vec<TensorRef>) -> Result<Staged> {
        if refs.len() != self.entries.len() {
            return Err(TensorError::Invalid {
                op: "stage_refs",
                msg: format!("{} refs for {} entries", refs.len(), self.entries.len()),
            });
        }
        Ok(Staged {
            refs,
            index: self.index.clone(),
        })
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }
}

/// Tape handles for one staging of a [`ParamStore`].
pub struct Staged {
    refs: Vec<TensorRef>,
    index: BTreeMap<String, usize>,
}

impl Staged {
    /// Handle for a parameter by name. Panics on unknown names: parameter
    /// names are fixed at model construction, a miss is a programming error.
    pub fn get(&self, name: &str) -> TensorRef {
        self.refs[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn refs(&self) -> &[TensorRef] {
        &self.refs
    }
}
