//! Named parameter storage and the per-pass evaluation context.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether normalization layers use batch statistics and data-dependent
/// initialization may run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (running statistics, init flags) are stored but not optimized.
    pub trainable: bool,
}

/// All tensors of a model, addressed by [`ParamId`] or unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("parameter name `{}` registered twice", name)));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry { name: name.to_string(), value, trainable });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("`{}` has shape {:?}, got {:?}", e.name, e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].trainable)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// One forward or inverse pass: a fresh tape plus access to the store.
pub struct Ctx<'a, T> {
    pub tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    mode: Mode,
    track: bool,
    min_scale: f64,
    conditioner_calls: usize,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// A pass whose parameters are constants.
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Ctx { tape: Tape::new(), store, mode, track: false, min_scale: f64::INFINITY, conditioner_calls: 0 }
    }

    /// A pass that records parameter gradients.
    pub fn with_grads(store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Ctx { track: true, ..Ctx::new(store, mode) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = &*self.store;
        let track = self.track && store.entries[id.0].trainable;
        self.tape.param(id, track, || store.get(id).clone())
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.tape.shape(v)
    }

    /// Records the smallest 1x1-convolution diagonal magnitude seen.
    pub fn note_scale(&mut self, s: f64) {
        self.min_scale = self.min_scale.min(s);
    }

    pub fn min_scale(&self) -> f64 {
        self.min_scale
    }

    pub(crate) fn count_conditioner_call(&mut self) {
        self.conditioner_calls += 1;
    }

    /// How often a cross-unit conditioner ran during this pass.
    pub fn conditioner_calls(&self) -> usize {
        self.conditioner_calls
    }

    /// Fails with a numeric error naming `stage` if `v` holds non-finite values.
    pub fn check_finite(&self, v: Var, stage: &str) -> Result<()> {
        if self.tape.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { stage: stage.to_string(), min_scale: self.min_scale })
        }
    }
}
