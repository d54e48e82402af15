use alloc::format;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::coupling::split_sizes;
use super::factor_out::gaussian_log_prob;
use super::per_example;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init};
use crate::noise::NoiseSource;
use crate::params::{Ctx, ParamStore};
use crate::real::Real;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DequantMode {
    /// `u ~ U[0, 1)`.
    Uniform,
    /// `u = sigmoid(f(v; x))`, `v ~ N(0, I)`, `f` a small conditional flow.
    Variational,
}

const LN_256: f64 = 5.545_177_444_479_562;
const HIDDEN: usize = 16;

#[derive(Clone, Debug)]
struct DequantCoupling {
    hidden: Conv2d,
    out: Conv2d,
    first_transformed: bool,
}

/// Maps 8-bit pixels to `[0, 1)` via `(x + u) / 256`.
#[derive(Clone, Debug)]
pub struct Dequantizer {
    pub mode: DequantMode,
    layers: Vec<DequantCoupling>,
    channels: usize,
}

impl Dequantizer {
    pub fn new<T: Real, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        mode: DequantMode,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        if mode == DequantMode::Variational {
            let (a, b) = split_sizes(channels);
            for (i, first) in [false, true].into_iter().enumerate() {
                let (cond, tr) = if first { (b, a) } else { (a, b) };
                if tr == 0 {
                    continue;
                }
                let n = format!("{}.flow{}", name, i);
                layers.push(DequantCoupling {
                    hidden: Conv2d::new(store, &format!("{}.hidden", n), cond + channels, HIDDEN, 3, Init::He, rng)?,
                    out: Conv2d::new(store, &format!("{}.out", n), HIDDEN, 2 * tr, 3, Init::Zero, rng)?,
                    first_transformed: first,
                });
            }
        }
        Ok(Dequantizer { mode, layers, channels })
    }

    /// Returns `(x_cont, scaling correction, ln q(u | x))`, the last two per example.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, noise: &mut NoiseSource) -> Result<(Var, Var, Var)> {
        let [b, c, h, w] = ctx.value(x).dims4("dequantize")?;
        if c != self.channels {
            return Err(Error::shape("dequantize", format!("expected {} channels, got {}", self.channels, c)));
        }
        if let Some(i) = ctx
            .value(x)
            .data()
            .iter()
            .position(|&v| !(v >= T::zero() && v <= T::of(255.0) && v.fract() == T::zero()))
        {
            return Err(Error::Data(format!("pixel {} at element {} is not in 0..=255", ctx.value(x).data()[i], i)));
        }
        let d = (c * h * w) as f64;
        let corr = ctx.constant(Tensor::scalar(T::of(-d * LN_256)));
        let corr = per_example(ctx, corr, b)?;
        let (u, penalty) = match self.mode {
            DequantMode::Uniform => {
                let u = ctx.constant(noise.uniform(&[c, h, w]));
                (u, ctx.constant(Tensor::zeros(&[b])))
            }
            DequantMode::Variational => self.variational(ctx, x, noise)?,
        };
        let xu = ctx.tape.add(x, u)?;
        Ok((ctx.tape.mul_scalar(xu, 1.0 / 256.0), corr, penalty))
    }

    fn variational<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, noise: &mut NoiseSource) -> Result<(Var, Var)> {
        let s = ctx.shape(x).to_vec();
        let feat = ctx.tape.mul_scalar(x, 1.0 / 255.0);
        let feat = ctx.tape.add_scalar(feat, -0.5);
        let mut v = ctx.constant(noise.normal(&s[1..]));
        let mut lq = gaussian_log_prob(ctx, v, None)?;
        let (a, _) = split_sizes(self.channels);
        for layer in &self.layers {
            let (v1, v2) = ctx.tape.split_channels(v, a)?;
            let (cond, tr) = if layer.first_transformed { (v2, v1) } else { (v1, v2) };
            let inp = ctx.tape.concat(&[cond, feat], 1)?;
            let hdn = layer.hidden.forward(ctx, inp)?;
            let hdn = ctx.tape.relu(hdn);
            let raw = layer.out.forward(ctx, hdn)?;
            let ntr = ctx.shape(tr)[1];
            let (raw_s, t) = ctx.tape.split_channels(raw, ntr)?;
            // scale 2 * sigmoid(raw) is exactly 1 at zero init
            let log_s = ctx.tape.log_sigmoid(raw_s);
            let log_s = ctx.tape.add_scalar(log_s, core::f64::consts::LN_2);
            let sc = ctx.tape.exp(log_s);
            let ts = ctx.tape.mul(tr, sc)?;
            let tr = ctx.tape.add(ts, t)?;
            v = if layer.first_transformed { ctx.tape.concat(&[tr, cond], 1)? } else { ctx.tape.concat(&[cond, tr], 1)? };
            let ld = ctx.tape.sum_per_example(log_s)?;
            lq = ctx.tape.sub(lq, ld)?;
        }
        let u = ctx.tape.sigmoid(v);
        let l1 = ctx.tape.log_sigmoid(v);
        let nv = ctx.tape.neg(v);
        let l2 = ctx.tape.log_sigmoid(nv);
        let jac = ctx.tape.add(l1, l2)?;
        let jac = ctx.tape.sum_per_example(jac)?;
        let lq = ctx.tape.sub(lq, jac)?;
        Ok((u, lq))
    }

    /// `clamp(floor(256 x), 0, 255)`.
    pub fn quantize<T: Real>(x_cont: &Tensor<T>) -> Tensor<T> {
        x_cont.map(|v| (v * T::of(256.0)).floor().max(T::zero()).min(T::of(255.0)))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.hidden.param_count() + l.out.param_count()).sum()
    }
}

/// `-d ln 256`, the log-determinant of dividing by 256.
pub fn scaling_correction(d: usize) -> f64 {
    -(d as f64) * LN_256
}
