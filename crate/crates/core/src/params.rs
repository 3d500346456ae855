//! Named parameters with gradient buffers.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Insertion-ordered set of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            grad: Tensor::zeros(value.shape()),
            name,
            value,
            trainable: true,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        Ok(self.get(self.id(name)?))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.by_name(name)?.value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Marks exactly the parameters whose name starts with one of `prefixes`
    /// as trainable.
    pub fn set_trainable_prefixes(&mut self, prefixes: &[String]) {
        for p in &mut self.params {
            p.trainable = prefixes.iter().any(|g| has_prefix(&p.name, g));
        }
    }

    /// Total scalar count of parameters under `prefix` (all if empty).
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| has_prefix(&p.name, prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and value bits of every parameter under
    /// `prefix`, as lowercase hex.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| has_prefix(&p.name, prefix)) {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Dotted-path prefix match: `"adapter"` matches `"adapter.linear1"` and
/// `"adapter"` but not `"adapterx"`. The empty prefix matches everything.
pub fn has_prefix(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("a.b", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            s.insert("a.b", Tensor::zeros(&[2])),
            Err(Error::DuplicateParameter(_))
        ));
        assert_eq!(s.get(s.id("a.b").unwrap()).grad.shape(), &[2]);
    }

    #[test]
    fn prefix_matching_respects_path_segments() {
        assert!(has_prefix("adapter.linear1", "adapter"));
        assert!(!has_prefix("adapterx.w", "adapter"));
        assert!(has_prefix("backbone.layer0.w_w.bias", "backbone.layer0.w_w"));
    }

    #[test]
    fn hash_changes_with_values() {
        let mut s = ParamStore::new();
        let id = s.insert("x.w", Tensor::zeros(&[3])).unwrap();
        s.insert("y.w", Tensor::zeros(&[3])).unwrap();
        let before = (s.hash_prefix("x"), s.hash_prefix("y"));
        s.get_mut(id).value.data_mut()[1] = 1e-300;
        assert_ne!(before.0, s.hash_prefix("x"));
        assert_eq!(before.1, s.hash_prefix("y"));
    }
}
