use alloc::format;

use rand::RngCore;

use crate::coupling_net::{CouplingNet, CouplingNetConfig};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::real::Real;
use crate::tensor::Var;

/// Channel split used by couplings: the first part takes the larger half.
pub fn split_sizes(c: usize) -> (usize, usize) {
    (c - c / 2, c / 2)
}

/// Which half of the channels a coupling transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CouplingSide {
    First,
    Second,
}

/// Affine coupling `y_t = s * x_t + t`, `(s, t)` computed from the other half,
/// with `s = sigmoid(raw + 2)`.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    pub net: CouplingNet,
    pub side: CouplingSide,
    pub channels: usize,
}

impl AffineCoupling {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        side: CouplingSide,
        cfg: &CouplingNetConfig,
        hw: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        if channels < 2 {
            return Err(Error::config(format!("{}: coupling needs at least 2 channels, got {}", name, channels)));
        }
        let (cond, tr) = Self::sizes(channels, side);
        let net = CouplingNet::new(store, &format!("{}.net", name), cond, 2 * tr, cfg, hw, rng)?;
        Ok(AffineCoupling { net, side, channels })
    }

    /// (conditioning channels, transformed channels)
    fn sizes(c: usize, side: CouplingSide) -> (usize, usize) {
        let (a, b) = split_sizes(c);
        match side {
            CouplingSide::Second => (a, b),
            CouplingSide::First => (b, a),
        }
    }

    fn halves<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<(Var, Var)> {
        let (a, _) = split_sizes(self.channels);
        let (x1, x2) = ctx.tape.split_channels(x, a)?;
        Ok(match self.side {
            CouplingSide::Second => (x1, x2),
            CouplingSide::First => (x2, x1),
        })
    }

    fn join<T: Real>(&self, ctx: &mut Ctx<T>, cond: Var, tr: Var) -> Result<Var> {
        match self.side {
            CouplingSide::Second => ctx.tape.concat(&[cond, tr], 1),
            CouplingSide::First => ctx.tape.concat(&[tr, cond], 1),
        }
    }

    /// `(ln s, t)` from the conditioning half.
    fn scale_shift<T: Real>(&self, ctx: &mut Ctx<T>, cond: Var) -> Result<(Var, Var)> {
        let (_, tr) = Self::sizes(self.channels, self.side);
        let raw = self.net.forward(ctx, cond)?;
        let (raw_s, t) = ctx.tape.split_channels(raw, tr)?;
        let shifted = ctx.tape.add_scalar(raw_s, 2.0);
        Ok((ctx.tape.log_sigmoid(shifted), t))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<(Var, Var)> {
        self.forward_with(ctx, x, |ctx, cond| self.scale_shift(ctx, cond))
    }

    pub fn inverse<T: Real>(&self, ctx: &mut Ctx<T>, y: Var) -> Result<Var> {
        self.inverse_with(ctx, y, |ctx, cond| self.scale_shift(ctx, cond))
    }

    /// Forward pass with `(ln s, t)` supplied by `f` instead of the network.
    pub fn forward_with<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        x: Var,
        f: impl FnOnce(&mut Ctx<T>, Var) -> Result<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let (cond, tr) = self.halves(ctx, x)?;
        let (log_s, t) = f(ctx, cond)?;
        let s = ctx.tape.exp(log_s);
        let ys = ctx.tape.mul(tr, s)?;
        let y_tr = ctx.tape.add(ys, t)?;
        let y = self.join(ctx, cond, y_tr)?;
        let ld = ctx.tape.sum_per_example(log_s)?;
        Ok((y, ld))
    }

    pub fn inverse_with<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        y: Var,
        f: impl FnOnce(&mut Ctx<T>, Var) -> Result<(Var, Var)>,
    ) -> Result<Var> {
        let (cond, y_tr) = self.halves(ctx, y)?;
        let (log_s, t) = f(ctx, cond)?;
        let s = ctx.tape.exp(log_s);
        let d = ctx.tape.sub(y_tr, t)?;
        let x_tr = ctx.tape.div(d, s)?;
        self.join(ctx, cond, x_tr)
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}
