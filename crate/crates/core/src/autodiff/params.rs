use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of trainable tensors.
///
/// Each store carries a process-unique id so a tape can tell parameters of
/// different stores apart. Cloning yields a store with a fresh id.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    tensors: Vec<Tensor>,
    names: Vec<String>,
    trainable: Vec<bool>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            tensors: self.tensors.clone(),
            names: self.names.clone(),
            trainable: self.trainable.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            tensors: Vec::new(),
            names: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.tensors.push(value);
        self.names.push(name.into());
        self.trainable.push(true);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalar values across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All values concatenated in construction order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every value from a flat slice laid out as by [`flatten`](Self::flatten).
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.scalar_count() {
            return Err(Error::Format(format!(
                "expected {} parameter values, got {}",
                self.scalar_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Adds i.i.d. `N(0, std^2)` noise to every value.
    pub fn perturb<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += std * e;
            }
        }
    }
}

/// Dense gradient for every tensor of a store, indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap(pub Vec<Tensor>);

impl GradMap {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradMap(store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Global L2 norm across every entry.
    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.0 {
            for g in t.data_mut() {
                *g *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}
