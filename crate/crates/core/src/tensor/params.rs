use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{contract_err, Result};

/// Stable identifier of a learnable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every learnable tensor, addressed by [`ParamId`] or by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(contract_err!("parameter `{name}` registered twice"));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces a value, requiring the same shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(contract_err!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient of a scalar loss with respect to every parameter of a store.
///
/// Parameters the loss does not reach hold exact zeros and report
/// `reached == false`.
#[derive(Clone, Debug)]
pub struct GradientMap<T> {
    grads: Vec<Tensor<T>>,
    reached: Vec<bool>,
}

impl<T: Real> GradientMap<T> {
    pub(crate) fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
            reached: vec![false; store.len()],
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) {
        self.reached[id.0] = true;
        for (d, s) in self.grads[id.0].data_mut().iter_mut().zip(grad.data()) {
            *d += *s;
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn reached(&self, id: ParamId) -> bool {
        self.reached[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// First parameter whose gradient holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.grads.iter().position(|g| !g.all_finite()).map(ParamId)
    }

    /// Elementwise sum of two maps over the same store.
    pub fn add(&self, other: &GradientMap<T>) -> GradientMap<T> {
        let grads = self
            .grads
            .iter()
            .zip(&other.grads)
            .map(|(a, b)| {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            })
            .collect();
        let reached = self.reached.iter().zip(&other.reached).map(|(a, b)| *a || *b).collect();
        GradientMap { grads, reached }
    }
}
