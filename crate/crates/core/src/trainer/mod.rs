//! Adamax, the learning-rate schedule and the training loop.
//!
//! One step draws the next minibatch of the epoch's permutation, optionally
//! mirrors images, evaluates a single-draw bound in training mode, clips the
//! global gradient norm and applies Adamax. ActNorm layers initialize from the
//! first minibatch inside the first step's forward pass, before any update.

mod adamax;
mod checkpoint;

pub use adamax::{adamax_step, Adamax, AdamaxHyper};
pub use checkpoint::{ArrayData, Checkpoint, Record, RngState};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::noise::NoiseSource;
use crate::params::ParamId;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Linear warm-up length in optimizer steps.
    pub warmup_steps: u64,
    /// Learning-rate factor applied after every epoch.
    pub decay_factor: f64,
    pub finetune_lr: f64,
    /// Constant-rate epochs after the main phase.
    pub finetune_epochs: usize,
    pub grad_clip_norm: f64,
    /// Mirror each training image with probability 1/2.
    pub hflip: bool,
    /// A minibatch above this many bits per dimension aborts training.
    pub divergence_bpd: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// The ImageNet32 recipe.
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            epochs: 20,
            warmup_steps: 5000,
            decay_factor: 0.95,
            finetune_lr: 2e-5,
            finetune_epochs: 2,
            grad_clip_norm: 100.0,
            hflip: true,
            divergence_bpd: 30.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn imagenet32() -> Self {
        Self::default()
    }

    pub fn imagenet64() -> Self {
        TrainConfig { batch_size: 32, epochs: 10, finetune_epochs: 1, ..Self::default() }
    }

    pub fn celeba() -> Self {
        TrainConfig { batch_size: 32, epochs: 50, finetune_epochs: 5, ..Self::default() }
    }

    pub fn cifar10() -> Self {
        TrainConfig { epochs: 580, decay_factor: 0.9975, finetune_epochs: 70, ..Self::default() }
    }

    /// Short schedule for the desk preset on 2000 synthetic images.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 2e-3,
            batch_size: 32,
            epochs: 32,
            warmup_steps: 50,
            decay_factor: 0.97,
            finetune_lr: 2e-5,
            finetune_epochs: 0,
            grad_clip_norm: 100.0,
            hflip: true,
            divergence_bpd: 30.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config(format!("decay_factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if !(self.finetune_lr >= 0.0 && self.finetune_lr.is_finite()) {
            return Err(Error::config(format!("finetune_lr must be non-negative, got {}", self.finetune_lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch_size must be at least 2 for batch statistics, got {}",
                self.batch_size
            )));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm)));
        }
        if !(self.divergence_bpd > 0.0) {
            return Err(Error::config(format!("divergence_bpd must be positive, got {}", self.divergence_bpd)));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + self.finetune_epochs
    }
}

/// `lr * min(1, step / warmup) * decay^epoch`, or the constant fine-tuning
/// rate once `epoch >= cfg.epochs`.
pub fn lr_at(step: u64, epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch >= cfg.epochs {
        return cfg.finetune_lr;
    }
    let warm = if cfg.warmup_steps == 0 { 1.0 } else { (step as f64 / cfg.warmup_steps as f64).min(1.0) };
    cfg.lr * warm * cfg.decay_factor.powi(epoch as i32)
}

/// Scales all gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|(_, g)| g.data().iter()).map(|v| v.as_f64() * v.as_f64()).sum();
    let norm = Float::sqrt(sq);
    if norm > max_norm {
        let f = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
    norm
}

/// Diagnostics of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Zero-based index of this update.
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    /// Minibatch loss (negative single-draw bound) in bits per dimension.
    pub bpd: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Smallest |s| over the invertible 1x1 convolutions.
    pub min_scale: f64,
    pub finetune: bool,
}

/// Position of the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    /// Minibatches already consumed in the current epoch.
    pub batch: usize,
    /// Source of flips and injected noise.
    pub rng: ChaCha8Rng,
}

pub struct Trainer<T> {
    pub model: FlowModel<T>,
    pub cfg: TrainConfig,
    pub opt: Adamax<T>,
    pub state: TrainState,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: FlowModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adamax::new(&model.store, AdamaxHyper::default());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer { model, cfg, opt, state: TrainState { step: 0, epoch: 0, batch: 0, rng } })
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.cfg.total_epochs()
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        (n / self.cfg.batch_size).max(1)
    }

    /// Image order of `epoch`, a function of the seed and the epoch alone.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        r.set_stream(2 + epoch as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        idx
    }

    fn next_indices(&self, data: &ImageDataset) -> Vec<usize> {
        let n = data.count;
        let order = self.epoch_order(n, self.state.epoch);
        let bs = self.cfg.batch_size.min(n);
        let start = self.state.batch * bs;
        order[start..start + bs].to_vec()
    }

    /// One optimizer step. On error the parameters and counters are left as
    /// they were before the step.
    pub fn step(&mut self, data: &ImageDataset) -> Result<StepLog> {
        if self.is_finished() {
            return Err(Error::Contract(String::from("training schedule already finished")));
        }
        if data.count < 2 {
            return Err(Error::Data(format!("training needs at least 2 images, got {}", data.count)));
        }
        let im = self.model.config.image;
        if (data.channels, data.height, data.width) != (im.channels, im.height, im.width) {
            return Err(Error::Data(format!(
                "dataset images are {}x{}x{}, model expects {}x{}x{}",
                data.channels, data.height, data.width, im.channels, im.height, im.width
            )));
        }
        let idx = self.next_indices(data);
        let mut rng = self.state.rng.clone();
        let flips: Option<Vec<bool>> =
            if self.cfg.hflip { Some(idx.iter().map(|_| rng.random::<bool>()).collect()) } else { None };
        let x = data.batch::<T>(&idx, flips.as_deref())?;
        let mut noise = NoiseSource::from_rng(&mut rng, idx.len());
        let step = self.state.step;
        let epoch = self.state.epoch;
        // the first forward pass initializes ActNorm in place
        let snapshot = (!self.model.is_initialized()).then(|| self.model.store.clone());
        let result = self.model.loss_and_grads(&x, &mut noise).and_then(|lg| {
            if lg.loss <= self.cfg.divergence_bpd {
                Ok(lg)
            } else {
                Err(Error::Diverged { step, reason: format!("minibatch loss {} bits/dim", lg.loss) })
            }
        });
        if let (Err(_), Some(s)) = (&result, snapshot) {
            self.model.store = s;
        }
        let lg = match result {
            Ok(lg) => lg,
            Err(Error::NonFinite { stage, min_scale }) => {
                return Err(Error::Diverged {
                    step,
                    reason: format!("non-finite values at {} (min |s| {:.3e})", stage, min_scale),
                })
            }
            Err(e) => return Err(e),
        };
        let mut grads = lg.grads;
        let grad_norm = clip_global_norm(&mut grads, self.cfg.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step, reason: String::from("non-finite gradient norm") });
        }
        let lr = lr_at(step, epoch, &self.cfg);
        self.opt.step(&mut self.model.store, &grads, lr)?;
        self.state.rng = rng;
        self.state.step += 1;
        self.state.batch += 1;
        if self.state.batch >= self.batches_per_epoch(data.count) {
            self.state.batch = 0;
            self.state.epoch += 1;
        }
        Ok(StepLog { step, epoch, lr, bpd: lg.loss, grad_norm, min_scale: lg.min_scale, finetune: epoch >= self.cfg.epochs })
    }

    /// Runs until the schedule ends or `max_steps` more steps were taken.
    pub fn run(
        &mut self,
        data: &ImageDataset,
        max_steps: Option<u64>,
        mut on_step: impl FnMut(&Self, &StepLog),
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while !self.is_finished() && max_steps.is_none_or(|m| (logs.len() as u64) < m) {
            let log = self.step(data)?;
            on_step(self, &log);
            logs.push(log);
        }
        Ok(logs)
    }
}
