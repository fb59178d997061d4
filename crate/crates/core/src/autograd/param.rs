use std::collections::HashMap;

use crate::error::{Error, Result};

use super::Tensor;

/// Index of a [`Parameter`] inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters are part of the model and the checkpoint but
    /// never receive gradients or optimizer updates.
    pub trainable: bool,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Owns every parameter of a model. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate parameter name `{name}`")));
        }
        if !value.is_finite() {
            return Err(Error::Parameter(format!("parameter `{name}` has non-finite values")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Count of scalar values in trainable parameters whose name starts
    /// with `prefix`.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(Parameter::numel)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds a backward pass result into the stored gradient accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (slot, g) in grads.slots.iter().enumerate() {
            if let (Some(g), Some(p)) = (g, self.params.get_mut(slot)) {
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
        }
    }

    /// Sets every gradient to the result of one backward pass: zero where
    /// the pass produced none.
    pub fn replace_grads(&mut self, grads: Gradients) {
        let mut slots = grads.slots;
        slots.resize_with(self.params.len(), || None);
        for (p, g) in self.params.iter_mut().zip(slots) {
            match g {
                Some(g) if p.trainable && g.shape() == p.grad.shape() => p.grad = g,
                _ => p.grad.data_mut().fill(0.0),
            }
        }
    }

    /// Replaces parameter values from another store holding identically
    /// named and shaped tensors.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Incompatible(format!("missing parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::dim(
                    format!("parameter `{}`", p.name),
                    p.value.shape(),
                    src.value.shape(),
                ));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// Parameter gradients produced by one backward pass, indexed by
/// [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }
}
