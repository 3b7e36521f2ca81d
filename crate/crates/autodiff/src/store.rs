use crate::tensor::{Real, Tensor};
use crate::{AutodiffError, Result};

/// Handle to an entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable parameters receive gradients and optimizer updates; buffers
/// (e.g. batch-norm running statistics) are persisted but never optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    kind: ParamKind,
    frozen: bool,
    value: Tensor<T>,
    grad: Vec<T>,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
}

/// Named parameters with gradient buffers and Adam state.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), step: 0 }
    }

    fn push(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let n = value.numel();
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            frozen: false,
            value,
            grad: vec![T::zero(); n],
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.push(name, ParamKind::Trainable, value)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.push(name, ParamKind::Buffer, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    /// Replaces a value, keeping the entry's shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(AutodiffError::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].grad
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let entry = &mut self.entries[id.0];
        if entry.kind == ParamKind::Buffer {
            return;
        }
        for (acc, &x) in entry.grad.iter_mut().zip(g) {
            *acc += x;
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Frozen parameters still receive gradients but are skipped by the optimizer.
    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].kind == ParamKind::Trainable
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Global L2 norm over the gradients of all trainable entries.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .flat_map(|e| e.grad.iter())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn adam_parts(
        &mut self,
        id: ParamId,
    ) -> Option<(&mut [T], &[T], &mut [T], &mut [T])> {
        let e = &mut self.entries[id.0];
        if e.kind != ParamKind::Trainable || e.frozen {
            return None;
        }
        Some((e.value.data_mut(), &e.grad, &mut e.first_moment, &mut e.second_moment))
    }

    pub fn moments(&self, id: ParamId) -> (&[T], &[T]) {
        let e = &self.entries[id.0];
        (&e.first_moment, &e.second_moment)
    }

    /// Copies every value (parameters and buffers) for later restoration.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(AutodiffError::Shape(format!(
                "snapshot holds {} tensors, store has {}",
                snapshot.len(),
                self.entries.len()
            )));
        }
        for (id, t) in snapshot.iter().enumerate() {
            self.set_value(ParamId(id), t.clone())?;
        }
        Ok(())
    }

    /// Discards Adam moments and the step counter, as when training restarts
    /// from loaded weights.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for e in &mut self.entries {
            e.first_moment.iter_mut().for_each(|m| *m = T::zero());
            e.second_moment.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}
