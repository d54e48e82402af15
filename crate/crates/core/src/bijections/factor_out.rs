use alloc::format;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init};
use crate::noise::NoiseSource;
use crate::params::{Ctx, ParamStore};
use crate::real::{Real, LN_2PI};
use crate::tensor::Var;

/// Splits off half of the channels and scores them under a diagonal Gaussian
/// whose parameters come from the retained half (or N(0, I) when
/// unconditional).
#[derive(Clone, Debug)]
pub struct FactorOut {
    prior: Option<Conv2d>,
    pub channels: usize,
}

/// Source of the dropped half on the inverse path.
pub enum Latent<'a> {
    /// Use this exact tensor.
    Given(Var),
    /// Draw `mu + temperature * sigma * eps`.
    Sample { noise: &'a mut NoiseSource, temperature: f64 },
}

impl FactorOut {
    pub fn new<T: Real, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        conditional: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if !channels.is_multiple_of(2) || channels == 0 {
            return Err(Error::shape("factor_out", format!("{}: {} channels cannot be halved", name, channels)));
        }
        let half = channels / 2;
        let prior = if conditional {
            Some(Conv2d::new(store, &format!("{}.prior", name), half, 2 * half, 3, Init::Zero, rng)?)
        } else {
            None
        };
        Ok(FactorOut { prior, channels })
    }

    /// `(mu, ln sigma)` for the dropped half, or `None` for N(0, I).
    fn gaussian<T: Real>(&self, ctx: &mut Ctx<T>, retained: Var) -> Result<Option<(Var, Var)>> {
        match &self.prior {
            Some(conv) => {
                let out = conv.forward(ctx, retained)?;
                Ok(Some(ctx.tape.split_channels(out, self.channels / 2)?))
            }
            None => Ok(None),
        }
    }

    /// Returns `(retained, dropped, ln p(dropped | retained))`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<(Var, Var, Var)> {
        let c = ctx.shape(x)[1];
        if c != self.channels {
            return Err(Error::shape("factor_out", format!("expected {} channels, got {}", self.channels, c)));
        }
        let (zr, zd) = ctx.tape.split_channels(x, c / 2)?;
        let lp = match self.gaussian(ctx, zr)? {
            Some((mu, log_sigma)) => gaussian_log_prob(ctx, zd, Some((mu, log_sigma)))?,
            None => gaussian_log_prob(ctx, zd, None)?,
        };
        Ok((zr, zd, lp))
    }

    pub fn inverse<T: Real>(&self, ctx: &mut Ctx<T>, retained: Var, latent: Latent<'_>) -> Result<Var> {
        let zd = match latent {
            Latent::Given(v) => v,
            Latent::Sample { noise, temperature } => {
                let s = ctx.shape(retained);
                let eps = noise.normal::<T>(&[self.channels / 2, s[2], s[3]]);
                let eps = ctx.constant(eps);
                let eps = ctx.tape.mul_scalar(eps, temperature);
                match self.gaussian(ctx, retained)? {
                    Some((mu, log_sigma)) => {
                        let sigma = ctx.tape.exp(log_sigma);
                        let se = ctx.tape.mul(eps, sigma)?;
                        ctx.tape.add(se, mu)?
                    }
                    None => eps,
                }
            }
        };
        ctx.tape.concat(&[retained, zd], 1)
    }

    pub fn param_count(&self) -> usize {
        self.prior.as_ref().map_or(0, |c| c.param_count())
    }
}

/// Per-example `sum ln N(z; mu, sigma^2)`; `None` means the standard normal.
pub(crate) fn gaussian_log_prob<T: Real>(ctx: &mut Ctx<T>, z: Var, params: Option<(Var, Var)>) -> Result<Var> {
    let (zs, log_sigma) = match params {
        Some((mu, log_sigma)) => {
            let d = ctx.tape.sub(z, mu)?;
            let inv = ctx.tape.neg(log_sigma);
            let inv = ctx.tape.exp(inv);
            (ctx.tape.mul(d, inv)?, Some(log_sigma))
        }
        None => (z, None),
    };
    let sq = ctx.tape.square(zs);
    let mut e = ctx.tape.mul_scalar(sq, -0.5);
    e = ctx.tape.add_scalar(e, -0.5 * LN_2PI);
    if let Some(ls) = log_sigma {
        e = ctx.tape.sub(e, ls)?;
    }
    ctx.tape.sum_per_example(e)
}
