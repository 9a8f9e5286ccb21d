use std::collections::HashMap;
use std::ops::Range;

use super::{NumericsError, Tensor};

/// One named parameter tensor together with its gradient buffer.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Tensor,
    offset: usize,
}

impl ParamEntry {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    /// Global index range `[offset, offset + len)` covered by this entry.
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.value.len()
    }
}

/// Named, flattened collection of model parameters.
///
/// Entries are laid out back to back in insertion order, so the global index
/// ranges are contiguous, disjoint and cover `[0, total_count)`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NumericsError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        let offset = self.total;
        self.total += value.len();
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
            offset,
        });
        Ok(())
    }

    /// Number of scalar parameters, |θ|.
    pub fn total_count(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entry(name).map(|e| &e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entry(name).map(|e| &e.grad)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    /// Replaces the value of an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), NumericsError> {
        let idx = *self
            .by_name
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        let entry = &mut self.entries[idx];
        if entry.value.shape() != value.shape() {
            return Err(NumericsError::ParamShape {
                name: name.to_string(),
                expected: entry.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub(crate) fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = *self.by_name.get(name)?;
        Some(&mut self.entries[idx].grad)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for e in &self.entries {
            out.extend_from_slice(e.grad.data());
        }
        out
    }

    /// Value at a global index.
    pub fn value_at(&self, index: usize) -> Option<f64> {
        let (e, local) = self.locate(index)?;
        Some(self.entries[e].value.data()[local])
    }

    pub fn set_value_at(&mut self, index: usize, value: f64) -> Result<(), NumericsError> {
        let (e, local) = self.locate(index).ok_or(NumericsError::IndexOutOfRange {
            index,
            total: self.total,
        })?;
        self.entries[e].value.data_mut()[local] = value;
        Ok(())
    }

    /// Maps a global index to `(entry position, local offset)`.
    pub fn locate(&self, index: usize) -> Option<(usize, usize)> {
        if index >= self.total {
            return None;
        }
        let pos = self.entries.partition_point(|e| e.offset <= index) - 1;
        Some((pos, index - self.entries[pos].offset))
    }

    /// True when both stores hold the same names, shapes and value bits.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }

    /// Adds the gradient buffers of `other` into this store's buffers.
    pub fn accumulate_grads_from(&mut self, other: &ParamStore) -> Result<(), NumericsError> {
        for e in &other.entries {
            let dst = self
                .grad_mut(&e.name)
                .ok_or_else(|| NumericsError::UnknownParam(e.name.clone()))?;
            for (d, s) in dst.data_mut().iter_mut().zip(e.grad.data()) {
                *d += s;
            }
        }
        Ok(())
    }

    /// Euclidean distance between the flattened values of two stores.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        self.flat_values()
            .iter()
            .zip(other.flat_values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Applies `θ_i <- θ_i - lr * g_i` to exactly the global indices in `allowed`.
///
/// `allowed` must be strictly increasing. Every other scalar keeps its bits.
/// Returns the number of scalars written.
pub fn masked_sgd_step(store: &mut ParamStore, lr: f64, allowed: &[usize]) -> Result<usize, NumericsError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(NumericsError::LearningRate(lr));
    }
    if let Some(&last) = allowed.last() {
        if last >= store.total {
            return Err(NumericsError::IndexOutOfRange {
                index: last,
                total: store.total,
            });
        }
    }
    if allowed.windows(2).any(|w| w[0] >= w[1]) {
        return Err(NumericsError::UnsortedIndices);
    }
    let mut entry = 0;
    for &index in allowed {
        while store.entries[entry].offset + store.entries[entry].value.len() <= index {
            entry += 1;
        }
        let e = &mut store.entries[entry];
        let local = index - e.offset;
        let g = e.grad.data()[local];
        e.value.data_mut()[local] -= lr * g;
    }
    Ok(allowed.len())
}

/// Plain SGD over every scalar in the store.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<usize, NumericsError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(NumericsError::LearningRate(lr));
    }
    for e in &mut store.entries {
        for (v, g) in e.value.data_mut().iter_mut().zip(e.grad.data()) {
            *v -= lr * g;
        }
    }
    Ok(store.total)
}
