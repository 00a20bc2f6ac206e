use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::Value;
use crate::error::{Error, Result};

/// Stable handle of a learnable parameter inside one [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub id: ParamId,
    pub name: String,
    pub value: Value,
    pub grad: Value,
}

/// Owns every learnable parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: impl Into<Value>) -> ParamId {
        let value = value.into();
        let id = ParamId(self.params.len());
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Parameter {
            id,
            name,
            grad: value.zeros_like(),
            value,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Value {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Value {
        &mut self.params[id.0].value
    }

    /// Replaces a parameter value; the shape and kind must not change.
    pub fn set_value(&mut self, id: ParamId, value: Value) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() || p.value.is_complex() != value.is_complex() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of real scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.scalar_count()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = p.value.zeros_like();
        }
    }

    /// Installs gradients from a backward pass; parameters absent from
    /// `grads` are reset to zero.
    pub fn set_grads(&mut self, grads: &Gradients) {
        for p in &mut self.params {
            p.grad = match grads.get(p.id) {
                Some(g) => g.clone(),
                None => p.value.zeros_like(),
            };
        }
    }
}

/// Gradients keyed by parameter, as returned by `Tape::backward`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Value>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Value> {
        self.map.get(&id)
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: Value) {
        match self.map.get_mut(&id) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.map.insert(id, grad);
            }
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.map {
            self.accumulate(id, g);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Value)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
