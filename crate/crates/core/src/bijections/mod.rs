//! Invertible layers. Every forward returns the output together with a
//! per-example log-determinant of shape `[batch]` in nats.

mod actnorm;
mod coupling;
mod dequant;
mod factor_out;
mod invconv;

pub use actnorm::ActNorm;
pub use coupling::{split_sizes, AffineCoupling, CouplingSide};
pub use dequant::{scaling_correction, DequantMode, Dequantizer};
pub use factor_out::{FactorOut, Latent};
pub(crate) use factor_out::gaussian_log_prob;
pub use invconv::InvConv1x1;

use alloc::vec::Vec;

use crate::error::Result;
use crate::params::Ctx;
use crate::real::Real;
use crate::tensor::{Tensor, Var};

/// Space-to-channel squeeze; a permutation, so its log-determinant is zero.
pub fn squeeze<T: Real>(ctx: &mut Ctx<T>, x: Var) -> Result<(Var, Var)> {
    let b = ctx.shape(x)[0];
    let y = ctx.tape.space_to_channel(x)?;
    let zero = ctx.constant(Tensor::zeros(&[b]));
    Ok((y, zero))
}

pub fn unsqueeze<T: Real>(ctx: &mut Ctx<T>, y: Var) -> Result<Var> {
    ctx.tape.channel_to_space(y)
}

/// Repeats a single-element value across the batch: `[1] -> [b]`.
pub(crate) fn per_example<T: Real>(ctx: &mut Ctx<T>, v: Var, b: usize) -> Result<Var> {
    let zeros = ctx.constant(Tensor::zeros(&[b]));
    ctx.tape.add(zeros, v)
}

/// Running per-example sums of the bound's components, kept on the tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct TermVars {
    pub logdet: Option<Var>,
    pub noise: Option<Var>,
    pub prior: Option<Var>,
    pub dequant: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Logdet,
    Noise,
    Prior,
    Dequant,
}

impl TermVars {
    pub fn add<T: Real>(&mut self, ctx: &mut Ctx<T>, term: Term, v: Var) -> Result<()> {
        let slot = match term {
            Term::Logdet => &mut self.logdet,
            Term::Noise => &mut self.noise,
            Term::Prior => &mut self.prior,
            Term::Dequant => &mut self.dequant,
        };
        *slot = Some(match *slot {
            Some(acc) => ctx.tape.add(acc, v)?,
            None => v,
        });
        Ok(())
    }

    /// Sum of all components, shape `[batch]`.
    pub fn total<T: Real>(&self, ctx: &mut Ctx<T>, batch: usize) -> Result<Var> {
        let mut acc = ctx.constant(Tensor::zeros(&[batch]));
        for v in [self.logdet, self.noise, self.prior, self.dequant].into_iter().flatten() {
            acc = ctx.tape.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn read<T: Real>(&self, ctx: &Ctx<T>, batch: usize) -> LikelihoodTerms {
        let get = |v: Option<Var>| match v {
            Some(v) => ctx.value(v).to_f64_vec(),
            None => alloc::vec![0.0; batch],
        };
        LikelihoodTerms {
            logdet: get(self.logdet),
            noise: get(self.noise),
            prior: get(self.prior),
            dequant: get(self.dequant),
        }
    }
}

/// Per-example components of the log-likelihood bound, in nats.
///
/// `noise` holds the cross-unit corrections (`-ln p*(e)` plus the log-scale of
/// the noise transform), `dequant` the dequantization scaling correction minus
/// `ln q(u|x)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LikelihoodTerms {
    pub logdet: Vec<f64>,
    pub noise: Vec<f64>,
    pub prior: Vec<f64>,
    pub dequant: Vec<f64>,
}

impl LikelihoodTerms {
    pub fn total(&self) -> Vec<f64> {
        (0..self.logdet.len())
            .map(|i| self.logdet[i] + self.noise[i] + self.prior[i] + self.dequant[i])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.total().iter().all(|v| v.is_finite())
    }
}
