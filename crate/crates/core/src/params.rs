//! Named parameter storage and the canonical flat parameter vector.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Convolution kernel `[out, in, kh, kw]` or linear weight `[out, in]`.
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered store of every tensor a model owns. Insertion order is the
/// canonical order used for flattening.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].kind.trainable())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).len()).sum()
    }

    /// Flattens trainable parameters in canonical order.
    pub fn to_vector(&self) -> ParamVector {
        let mut values = Vec::with_capacity(self.trainable_count());
        for id in self.trainable_ids() {
            values.extend_from_slice(self.get(id).data());
        }
        ParamVector { values }
    }

    /// Inverse of [`to_vector`](Self::to_vector).
    pub fn load_vector(&mut self, vector: &ParamVector) -> Result<()> {
        if vector.len() != self.trainable_count() {
            return Err(shape_err!("parameter vector has {} values, model has {}", vector.len(), self.trainable_count()));
        }
        let mut offset = 0;
        let ids: Vec<ParamId> = self.trainable_ids().collect();
        for id in ids {
            let t = self.get_mut(id);
            let n = t.len();
            t.data_mut().copy_from_slice(&vector.values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Replaces every tensor (trainable and running statistics) from another
    /// store with the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(shape_err!("stores have {} vs {} entries", self.len(), other.len()));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.value.shape() != b.value.shape() || a.name != b.name {
                return Err(shape_err!("entry `{}` does not match `{}`", a.name, b.name));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }

    /// Sets a named tensor, validating its shape.
    pub fn set_named(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::Missing(name.into()))?;
        if self.get(id).shape() != value.shape() {
            return Err(shape_err!("`{}` has shape {:?}, got {:?}", name, self.get(id).shape(), value.shape()));
        }
        *self.get_mut(id) = value;
        Ok(())
    }
}

/// Flat vector of all trainable parameters in the store's canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self { values: alloc::vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|v| v * v).sum())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() {
            return Err(shape_err!("vectors of length {} and {}", self.len(), other.len()));
        }
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(libm::sqrt(s))
    }
}
