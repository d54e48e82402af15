use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use super::per_example;
use crate::error::{Error, Result};
use crate::params::{Ctx, Mode, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{Tensor, Var};

/// Per-channel affine map `y = s * x + b` with data-dependent initialization.
#[derive(Clone, Debug)]
pub struct ActNorm {
    name: alloc::string::String,
    scale: ParamId,
    bias: ParamId,
    initialized: ParamId,
    pub channels: usize,
}

const MIN_SCALE: f64 = 1e-12;

impl ActNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let s = [1, channels, 1, 1];
        Ok(ActNorm {
            name: name.to_string(),
            scale: store.register(&format!("{}.scale", name), Tensor::ones(&s), true)?,
            bias: store.register(&format!("{}.bias", name), Tensor::zeros(&s), true)?,
            initialized: store.register(&format!("{}.initialized", name), Tensor::zeros(&[1]), false)?,
            channels,
        })
    }

    pub fn is_initialized<T: Real>(&self, store: &ParamStore<T>) -> bool {
        store.get(self.initialized).data()[0] != T::zero()
    }

    /// Sets scale and bias so that `x` comes out with zero mean and unit
    /// standard deviation per channel.
    pub fn initialize<T: Real>(&self, store: &mut ParamStore<T>, x: &Tensor<T>) -> Result<()> {
        let [b, c, h, w] = x.dims4("actnorm")?;
        let n = (b * h * w) as f64;
        let mut scale = Vec::with_capacity(c);
        let mut bias = Vec::with_capacity(c);
        for ch in 0..c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for i in 0..b {
                for v in &x.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w] {
                    let v = v.as_f64();
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            let s = 1.0 / (num_traits::Float::sqrt(var) + 1e-6);
            scale.push(T::of(s));
            bias.push(T::of(-mean * s));
        }
        store.set(self.scale, Tensor::new(&[1, c, 1, 1], scale)?)?;
        store.set(self.bias, Tensor::new(&[1, c, 1, 1], bias)?)?;
        store.set(self.initialized, Tensor::ones(&[1]))
    }

    fn check_scale<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let min = store.get(self.scale).data().iter().map(|v| v.abs().as_f64()).fold(f64::INFINITY, f64::min);
        if min < MIN_SCALE {
            return Err(Error::SingularScale { layer: self.name.clone(), value: min });
        }
        Ok(())
    }

    /// Runs initialization on the first training batch.
    fn maybe_init<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<()> {
        if ctx.mode() == Mode::Train && !self.is_initialized(ctx.store()) {
            let xv = ctx.value(x).clone();
            self.initialize(ctx.store_mut(), &xv)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<(Var, Var)> {
        self.maybe_init(ctx, x)?;
        self.check_scale(ctx.store())?;
        let [b, _, h, w] = ctx.value(x).dims4("actnorm")?;
        let s = ctx.param(self.scale);
        let bias = ctx.param(self.bias);
        let xs = ctx.tape.mul(x, s)?;
        let y = ctx.tape.add(xs, bias)?;
        let abs = ctx.tape.abs(s);
        let ls = ctx.tape.log(abs)?;
        let total = ctx.tape.sum_all(ls);
        let total = ctx.tape.mul_scalar(total, (h * w) as f64);
        Ok((y, per_example(ctx, total, b)?))
    }

    pub fn inverse<T: Real>(&self, ctx: &mut Ctx<T>, y: Var) -> Result<Var> {
        self.check_scale(ctx.store())?;
        let s = ctx.param(self.scale);
        let bias = ctx.param(self.bias);
        let yc = ctx.tape.sub(y, bias)?;
        ctx.tape.div(yc, s)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn scale_id(&self) -> ParamId {
        self.scale
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }
}
