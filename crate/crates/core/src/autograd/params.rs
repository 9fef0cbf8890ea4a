use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every learnable tensor of a model, addressed by [`ParamId`] and by canonical name.
/// Each store (and each clone) carries a process-unique key, so parameters of several stores can
/// share one graph.
#[derive(Debug)]
pub struct ParamStore {
    key: u64,
    params: Vec<Param>,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore { key: NEXT_STORE.fetch_add(1, Ordering::Relaxed), params: Vec::new() }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore { key: NEXT_STORE.fetch_add(1, Ordering::Relaxed), params: self.params.clone() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Copy that keeps this store's key: gradients computed through the replica accumulate into
    /// the original.
    pub fn replica(&self) -> ParamStore {
        ParamStore { key: self.key, params: self.params.clone() }
    }

    pub(crate) fn key(&self) -> u64 {
        self.key
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }
}
