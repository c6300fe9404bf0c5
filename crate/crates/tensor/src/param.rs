use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_mismatch, Result, TensorError};
use crate::{Float, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Runtime identity of a [`ParamStore`]; never persisted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StoreId(u64);

impl StoreId {
    fn fresh() -> Self {
        Self(NEXT_STORE.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named trainable tensor and its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Frozen parameters are bound as constants and skipped by optimizers.
    pub trainable: bool,
}

impl<T: Float> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }
}

/// The ordered parameter set owned by one network component.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: StoreId,
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Clone for ParamStore<T> {
    /// A clone is a distinct store: its gradients never mix with the original's.
    fn clone(&self) -> Self {
        Self {
            id: StoreId::fresh(),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: StoreId::fresh(),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    /// Register a parameter and return its index. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let idx = self.params.len();
        self.index.insert(name.clone(), idx);
        self.params.push(Parameter::new(name, value));
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<T> {
        &mut self.params[idx]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<T>> {
        self.find(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| TensorError::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same names, same shapes, same order.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(TensorError::Archive(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name {
                return Err(TensorError::Archive(format!(
                    "parameter name mismatch: `{}` vs `{}`",
                    a.name, b.name
                )));
            }
            if a.value.shape() != b.value.shape() {
                return Err(shape_mismatch("param", a.value.shape(), b.value.shape()));
            }
        }
        Ok(())
    }

    /// Overwrite values from `other`, which must be compatible.
    pub fn copy_values_from(&mut self, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value.data_mut().copy_from_slice(b.value.data());
        }
        Ok(())
    }

    /// Bitwise equality of all values.
    pub fn values_bit_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }

    /// Snapshot of `(name, value)` pairs in registration order.
    pub fn named_values(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Load values by name. Every parameter must be present with a matching shape.
    pub fn load_named(&mut self, values: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor<T>> =
            values.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| TensorError::MissingParameter(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(TensorError::Archive(format!(
                    "shape mismatch for `{}`: stored {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = (*t).clone();
        }
        if lookup.len() != self.params.len() {
            let extra: Vec<&str> = lookup
                .keys()
                .filter(|k| !self.index.contains_key(**k))
                .copied()
                .collect();
            return Err(TensorError::Archive(format!(
                "unexpected parameters in archive: {extra:?}"
            )));
        }
        Ok(())
    }
}
