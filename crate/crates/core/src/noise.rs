//! Per-example random streams.
//!
//! Each example in a batch draws from its own generator, so an example's
//! noise does not depend on its position in the batch or on the batch size.

use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct NoiseSource {
    streams: Vec<ChaCha8Rng>,
}

impl NoiseSource {
    /// One fresh stream per example, seeded from `rng`.
    pub fn from_rng<R: RngCore + ?Sized>(rng: &mut R, batch: usize) -> Self {
        NoiseSource { streams: (0..batch).map(|_| ChaCha8Rng::seed_from_u64(rng.next_u64())).collect() }
    }

    /// Streams addressed by explicit per-example keys under a common seed.
    pub fn from_keys(seed: u64, keys: &[u64]) -> Self {
        let streams = keys
            .iter()
            .map(|&k| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(k);
                r
            })
            .collect();
        NoiseSource { streams }
    }

    pub fn batch(&self) -> usize {
        self.streams.len()
    }

    /// Standard normal draws of shape `[batch, rest...]`.
    pub fn normal<T: Real>(&mut self, rest: &[usize]) -> Tensor<T> {
        self.fill(rest, |r| T::of(r.sample::<f64, _>(StandardNormal)))
    }

    /// Uniform draws on `[0, 1)` of shape `[batch, rest...]`.
    pub fn uniform<T: Real>(&mut self, rest: &[usize]) -> Tensor<T> {
        // rounding to f32 can reach 1.0
        let top = T::one() - T::epsilon();
        self.fill(rest, |r| T::of(r.random::<f64>()).min(top))
    }

    fn fill<T: Real>(&mut self, rest: &[usize], mut f: impl FnMut(&mut ChaCha8Rng) -> T) -> Tensor<T> {
        let per: usize = rest.iter().product();
        let mut data = Vec::with_capacity(per * self.streams.len());
        for s in &mut self.streams {
            for _ in 0..per {
                data.push(f(s));
            }
        }
        let mut shape = Vec::with_capacity(rest.len() + 1);
        shape.push(self.streams.len());
        shape.extend_from_slice(rest);
        Tensor::from_parts(shape, data)
    }
}
