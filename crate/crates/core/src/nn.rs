//! Non-invertible layers used inside conditioners.

use alloc::format;

use num_traits::Float;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::params::{Ctx, Mode, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-normal weights, zero bias.
    He,
    /// All zeros: the layer outputs its bias, which is also zero.
    Zero,
}

/// Stride-1 convolution with "same" padding and a bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Real, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "{}: conv {}->{} with kernel {} is not buildable",
                name, c_in, c_out, kernel
            )));
        }
        let shape = [c_out, c_in, kernel, kernel];
        let w = match init {
            Init::He => Tensor::randn(&shape, Float::sqrt(2.0 / (c_in * kernel * kernel) as f64), rng),
            Init::Zero => Tensor::zeros(&shape),
        };
        let weight = store.register(&format!("{}.weight", name), w, true)?;
        let bias = store.register(&format!("{}.bias", name), Tensor::zeros(&[1, c_out, 1, 1]), true)?;
        Ok(Conv2d { weight, bias, c_in, c_out, kernel })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.tape.conv2d(x, w, self.kernel / 2)?;
        ctx.tape.add(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }
}

/// Per-channel batch normalization with running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    pub channels: usize,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let s = [1, channels, 1, 1];
        Ok(BatchNorm2d {
            gamma: store.register(&format!("{}.gamma", name), Tensor::ones(&s), true)?,
            beta: store.register(&format!("{}.beta", name), Tensor::zeros(&s), true)?,
            running_mean: store.register(&format!("{}.running_mean", name), Tensor::zeros(&s), false)?,
            running_var: store.register(&format!("{}.running_var", name), Tensor::ones(&s), false)?,
            channels,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let [b, _, h, w] = ctx.value(x).dims4("batch_norm")?;
        let (mean, var) = match ctx.mode() {
            Mode::Train => {
                if b < 2 {
                    return Err(Error::Contract(format!(
                        "batch norm in training mode needs a batch of at least 2, got {}",
                        b
                    )));
                }
                let mean = ctx.tape.mean_axes(x, &[0, 2, 3])?;
                let xc = ctx.tape.sub(x, mean)?;
                let sq = ctx.tape.square(xc);
                let var = ctx.tape.mean_axes(sq, &[0, 2, 3])?;
                let n = (b * h * w) as f64;
                let unbiased = ctx.value(var).map(|v| v * T::of(n / (n - 1.0)));
                let m = T::of(BN_MOMENTUM);
                let new_mean = blend(ctx.store().get(self.running_mean), ctx.value(mean), m);
                let new_var = blend(ctx.store().get(self.running_var), &unbiased, m);
                ctx.store_mut().set(self.running_mean, new_mean)?;
                ctx.store_mut().set(self.running_var, new_var)?;
                (mean, var)
            }
            Mode::Eval => {
                let mean = ctx.constant(ctx.store().get(self.running_mean).clone());
                let var = ctx.constant(ctx.store().get(self.running_var).clone());
                (mean, var)
            }
        };
        let xc = ctx.tape.sub(x, mean)?;
        let ve = ctx.tape.add_scalar(var, BN_EPS);
        let sd = ctx.tape.sqrt(ve)?;
        let xn = ctx.tape.div(xc, sd)?;
        let g = ctx.param(self.gamma);
        let bt = ctx.param(self.beta);
        let y = ctx.tape.mul(xn, g)?;
        ctx.tape.add(y, bt)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

fn blend<T: Real>(old: &Tensor<T>, new: &Tensor<T>, m: T) -> Tensor<T> {
    let data = old.data().iter().zip(new.data()).map(|(&o, &n)| (T::one() - m) * o + m * n).collect();
    Tensor::new(old.shape(), data).expect("same shape")
}

/// Dense matrix parameter applied to the last axis: `x[..., i] -> x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Tensor::randn(&[d_in, d_out], Float::sqrt(1.0 / d_in as f64), rng);
        Ok(Linear {
            weight: store.register(&format!("{}.weight", name), w, true)?,
            bias: store.register(&format!("{}.bias", name), Tensor::zeros(&[1, d_out]), true)?,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }
}
