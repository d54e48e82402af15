use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Trainer;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => ArrayData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => ArrayData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        }
    }

    fn to_vec<T: Real>(&self) -> Vec<T> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        }
    }
}

/// One named array.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Data(format!("record `{}` has shape {:?} but {} values", name, shape, data.len())));
        }
        Ok(Record { name, shape, data })
    }

    fn scalar(name: &str, v: f64) -> Self {
        Record { name: name.to_string(), shape: alloc::vec![1], data: ArrayData::F64(alloc::vec![v]) }
    }

    fn tensor<T: Real>(name: String, t: &Tensor<T>) -> Self {
        Record { name, shape: t.shape().to_vec(), data: ArrayData::from_tensor(t) }
    }
}

/// Position of a `ChaCha8Rng`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Everything needed to continue training: parameters and buffers under
/// `param.<name>`, Adamax moments under `adamax.m.<name>` and
/// `adamax.u.<name>`, counters under `train.*`, the configuration text and the
/// trainer's random stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
    pub config: String,
    pub rng: RngState,
}

const COUNTERS: [&str; 4] = ["train.step", "train.epoch", "train.batch", "adamax.t"];

impl Checkpoint {
    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn counter(&self, name: &str) -> Result<u64> {
        let r = self.record(name).ok_or_else(|| Error::Data(format!("checkpoint lacks `{}`", name)))?;
        let v = match &r.data {
            ArrayData::F64(v) if v.len() == 1 => v[0],
            _ => return Err(Error::Data(format!("`{}` must be a single f64", name))),
        };
        if !(v >= 0.0 && num_traits::Float::fract(v) == 0.0 && v < 9.007_199_254_740_992e15) {
            return Err(Error::Data(format!("`{}` is not a counter: {}", name, v)));
        }
        Ok(v as u64)
    }

    /// Copies every `param.*` record into `store`; all store entries must be
    /// present with matching shapes.
    pub fn load_params<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let key = format!("param.{}", store.name(id));
            let r = self.record(&key).ok_or_else(|| Error::Data(format!("checkpoint lacks `{}`", key)))?;
            let t = Tensor::new(&r.shape, r.data.to_vec())
                .map_err(|e| Error::Data(format!("record `{}`: {}", key, e)))?;
            store.set(id, t).map_err(|e| Error::Data(format!("record `{}`: {}", key, e)))?;
        }
        Ok(())
    }

    /// Parameters only, for evaluation and sampling.
    pub fn from_store<T: Real>(store: &ParamStore<T>, config: String) -> Self {
        let records = store.entries().iter().map(|e| Record::tensor(format!("param.{}", e.name), &e.value)).collect();
        Checkpoint { records, config, rng: RngState::of(&ChaCha8Rng::seed_from_u64(0)) }
    }
}

impl<T: Real> Trainer<T> {
    pub fn to_checkpoint(&self, config: String) -> Checkpoint {
        let store = &self.model.store;
        let mut ck = Checkpoint::from_store(store, config);
        for (id, m, u) in &self.opt.moments {
            ck.records.push(Record::tensor(format!("adamax.m.{}", store.name(*id)), m));
            ck.records.push(Record::tensor(format!("adamax.u.{}", store.name(*id)), u));
        }
        let s = &self.state;
        for (name, v) in COUNTERS.iter().zip([s.step, s.epoch as u64, s.batch as u64, self.opt.t]) {
            ck.records.push(Record::scalar(name, v as f64));
        }
        ck.rng = RngState::of(&s.rng);
        ck
    }

    /// Restores parameters, moments, counters and the random stream. The
    /// trainer must have been built from the same configuration.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut store = self.model.store.clone();
        ck.load_params(&mut store)?;
        let mut opt = self.opt.clone();
        for (id, m, u) in opt.moments.iter_mut() {
            for (prefix, dst) in [("adamax.m.", m), ("adamax.u.", u)] {
                let key = format!("{}{}", prefix, store.name(*id));
                let r = ck.record(&key).ok_or_else(|| Error::Data(format!("checkpoint lacks `{}`", key)))?;
                if r.shape != dst.shape() {
                    return Err(Error::Data(format!("record `{}` has shape {:?}, expected {:?}", key, r.shape, dst.shape())));
                }
                *dst = Tensor::new(&r.shape, r.data.to_vec())?;
            }
        }
        let [step, epoch, batch, t] = COUNTERS.map(|n| ck.counter(n));
        opt.t = t?;
        self.state.step = step?;
        self.state.epoch = epoch? as usize;
        self.state.batch = batch? as usize;
        self.state.rng = ck.rng.restore();
        self.model.store = store;
        self.opt = opt;
        Ok(())
    }
}
