use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamaxHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxHyper {
    fn default() -> Self {
        AdamaxHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adamax update of a flat parameter slice at step `t` (1-based):
/// `m = b1 m + (1 - b1) g`, `u = max(b2 u, |g|)`,
/// `theta -= lr / (1 - b1^t) * m / (u + eps)`.
pub fn adamax_step<T: Real>(theta: &mut [T], grad: &[T], m: &mut [T], u: &mut [T], lr: f64, t: u64, h: AdamaxHyper) {
    let b1 = T::of(h.beta1);
    let b2 = T::of(h.beta2);
    let eps = T::of(h.eps);
    let step = T::of(lr / (1.0 - num_traits::Float::powi(h.beta1, t.min(i32::MAX as u64) as i32)));
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        u[i] = (b2 * u[i]).max(g.abs());
        theta[i] -= step * m[i] / (u[i] + eps);
    }
}

/// Adamax moments for every trainable tensor of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adamax<T> {
    pub hyper: AdamaxHyper,
    /// Number of updates applied so far.
    pub t: u64,
    /// `(param, first moment, infinity norm)` in store order.
    pub moments: Vec<(ParamId, Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adamax<T> {
    pub fn new(store: &ParamStore<T>, hyper: AdamaxHyper) -> Self {
        let moments = store
            .trainable_ids()
            .map(|id| {
                let s = store.get(id).shape().to_vec();
                (id, Tensor::zeros(&s), Tensor::zeros(&s))
            })
            .collect();
        Adamax { hyper, t: 0, moments }
    }

    /// Applies one update. `grads` may omit parameters that received no
    /// gradient; they are treated as zero.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite { stage: alloc::format!("gradient of {}", store.name(*id)), min_scale: f64::NAN });
            }
        }
        let mut grads: Vec<&(ParamId, Tensor<T>)> = grads.iter().collect();
        grads.sort_by_key(|g| g.0);
        self.t += 1;
        let mut gi = 0;
        for (id, m, u) in &mut self.moments {
            while gi < grads.len() && grads[gi].0 < *id {
                gi += 1;
            }
            let zeros;
            let g = if gi < grads.len() && grads[gi].0 == *id {
                grads[gi].1.data()
            } else {
                zeros = alloc::vec![T::zero(); m.numel()];
                &zeros
            };
            let theta = store.get_mut(*id).data_mut();
            adamax_step(theta, g, m.data_mut(), u.data_mut(), lr, self.t, self.hyper);
        }
        Ok(())
    }
}
