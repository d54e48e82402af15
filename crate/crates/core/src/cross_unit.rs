//! Noise augmentation between flow units.
//!
//! A unit output `z` is extended with `k` channels `sigma * e + mu`, where
//! `e ~ N(0, I)` and `(mu, sigma)` come from a conditioner over earlier unit
//! outputs. The bound picks up `-ln p*(e) + sum ln sigma` for each draw.
//! Inverting only needs to drop the extra channels.

use alloc::format;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::bijections::TermVars;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init};
use crate::noise::NoiseSource;
use crate::params::{Ctx, ParamStore};
use crate::real::{Real, LN_2PI};
use crate::tensor::{Tensor, Var};

/// How units are joined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// No augmentation; units are plain sequences of modules.
    None,
    /// Append `e` itself (`mu = 0`, `sigma = 1`).
    White,
    /// Append `sigma * e + mu` from a learned conditioner.
    Preconditioned,
}

/// Which earlier outputs the conditioner sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// Block input, all earlier unit outputs and the current unit's output.
    Dense,
    /// Block input and earlier unit outputs only.
    Strict,
}

pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
struct Conditioner {
    hidden: Conv2d,
    out: Conv2d,
}

#[derive(Clone, Debug)]
pub struct CrossUnit {
    pub k: usize,
    cond: Option<Conditioner>,
}

/// Result of one augmentation.
pub struct Augmented {
    pub z_aug: Var,
    /// `-ln p*(e) + sum ln sigma` per example.
    pub delta: Var,
    pub e: Var,
    pub mu: Option<Var>,
    pub sigma: Option<Var>,
}

impl CrossUnit {
    /// `context_channels` is ignored for white noise.
    pub fn new<T: Real, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        context_channels: usize,
        hidden: usize,
        preconditioned: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let cond = if preconditioned && k > 0 {
            Some(Conditioner {
                hidden: Conv2d::new(store, &format!("{}.cond.hidden", name), context_channels, hidden, 1, Init::He, rng)?,
                out: Conv2d::new(store, &format!("{}.cond.out", name), hidden, 2 * k, 3, Init::Zero, rng)?,
            })
        } else {
            None
        };
        Ok(CrossUnit { k, cond })
    }

    pub fn is_preconditioned(&self) -> bool {
        self.cond.is_some()
    }

    /// `(mu, sigma)` with `sigma = softplus(raw) + 1e-4`.
    pub fn conditioner<T: Real>(&self, ctx: &mut Ctx<T>, context: Var) -> Result<Option<(Var, Var)>> {
        let Some(c) = &self.cond else { return Ok(None) };
        ctx.count_conditioner_call();
        let h = c.hidden.forward(ctx, context)?;
        let h = ctx.tape.relu(h);
        let out = c.out.forward(ctx, h)?;
        let (mu, raw) = ctx.tape.split_channels(out, self.k)?;
        let sp = ctx.tape.softplus(raw);
        Ok(Some((mu, ctx.tape.add_scalar(sp, SIGMA_FLOOR))))
    }

    pub fn augment<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        z: Var,
        context: &[Var],
        noise: &mut NoiseSource,
    ) -> Result<Augmented> {
        let [_, _, h, w] = ctx.value(z).dims4("augment")?;
        for &c in context {
            let s = ctx.shape(c);
            if s.len() != 4 || s[2] != h || s[3] != w {
                return Err(Error::shape(
                    "augment",
                    format!("context {:?} does not match the {}x{} extent of z", s, h, w),
                ));
            }
        }
        let params = if self.cond.is_some() {
            let ctxv = ctx.tape.concat(context, 1)?;
            self.conditioner(ctx, ctxv)?
        } else {
            None
        };
        let e = ctx.constant(noise.normal(&[self.k, h, w]));
        let (mu, sigma) = params.map_or((None, None), |(m, s)| (Some(m), Some(s)));
        let (z_aug, delta) = augment_with(ctx, z, e, mu, sigma)?;
        Ok(Augmented { z_aug, delta, e, mu, sigma })
    }

    pub fn param_count(&self) -> usize {
        self.cond.as_ref().map_or(0, |c| c.hidden.param_count() + c.out.param_count())
    }
}

/// `[z, sigma * e + mu]` and its bound correction; missing `mu`/`sigma`
/// mean 0 and 1.
pub fn augment_with<T: Real>(
    ctx: &mut Ctx<T>,
    z: Var,
    e: Var,
    mu: Option<Var>,
    sigma: Option<Var>,
) -> Result<(Var, Var)> {
    let ez = ctx.shape(e).to_vec();
    let b = ez[0];
    let d = ez[1..].iter().product::<usize>() as f64;
    let mut a = e;
    let mut log_sigma_sum = None;
    if let Some(s) = sigma {
        a = ctx.tape.mul(a, s)?;
        let ones = ctx.constant(Tensor::ones(&ez));
        let full = ctx.tape.mul(s, ones)?;
        let ls = ctx.tape.log(full)?;
        log_sigma_sum = Some(ctx.tape.sum_per_example(ls)?);
    }
    if let Some(m) = mu {
        a = ctx.tape.add(a, m)?;
    }
    let z_aug = ctx.tape.concat(&[z, a], 1)?;
    // -ln p*(e) = |e|^2 / 2 + d ln(2 pi) / 2
    let sq = ctx.tape.square(e);
    let half = ctx.tape.mul_scalar(sq, 0.5);
    let mut delta = ctx.tape.sum_per_example(half)?;
    delta = ctx.tape.add_scalar(delta, 0.5 * d * LN_2PI);
    if let Some(ls) = log_sigma_sum {
        delta = ctx.tape.add(delta, ls)?;
    }
    debug_assert_eq!(ctx.shape(delta), &[b]);
    Ok((z_aug, delta))
}

/// Drops the last `k` channels.
pub fn strip<T: Real>(ctx: &mut Ctx<T>, z_aug: Var, k: usize) -> Result<Var> {
    let c = ctx.shape(z_aug)[1];
    if k > c {
        return Err(Error::shape("strip", format!("cannot remove {} channels from {}", k, c)));
    }
    ctx.tape.narrow(z_aug, 1, 0, c - k)
}

/// Adds an augmentation's correction to the noise term.
pub fn record<T: Real>(ctx: &mut Ctx<T>, terms: &mut TermVars, aug: &Augmented) -> Result<()> {
    terms.add(ctx, crate::bijections::Term::Noise, aug.delta)
}
