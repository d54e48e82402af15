//! Single-head self-attention with the Nystrom low-rank approximation.

use alloc::format;

use num_traits::Float;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Ctx, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{Tensor, Var};

/// Averaging matrix `[groups, n]` for contiguous segments of `ceil(n / m)`
/// positions; the last segment may be shorter.
pub fn landmark_matrix<T: Real>(n: usize, m: usize) -> Result<Tensor<T>> {
    if m == 0 || m > n {
        return Err(Error::config(format!("{} landmarks for a sequence of {}", m, n)));
    }
    let seg = n.div_ceil(m);
    let groups = n.div_ceil(seg);
    let mut t = Tensor::zeros(&[groups, n]);
    for g in 0..groups {
        let (lo, hi) = (g * seg, ((g + 1) * seg).min(n));
        let wgt = T::of(1.0 / (hi - lo) as f64);
        for j in lo..hi {
            t.data_mut()[g * n + j] = wgt;
        }
    }
    Ok(t)
}

/// Newton-Schulz iteration for the pseudo-inverse of each `[g, g]` matrix in
/// a `[b, g, g]` batch, started from `A^T / (||A||_1 ||A||_inf)`.
pub fn newton_schulz_pinv<T: Real>(ctx: &mut Ctx<T>, a: Var, iterations: usize) -> Result<Var> {
    let g = ctx.shape(a)[1];
    let abs = ctx.tape.abs(a);
    let col = ctx.tape.sum_axes(abs, &[1])?;
    let col = ctx.tape.max_axis(col, 2)?;
    let row = ctx.tape.sum_axes(abs, &[2])?;
    let row = ctx.tape.max_axis(row, 1)?;
    let norm = ctx.tape.mul(col, row)?;
    let at = ctx.tape.transpose(a)?;
    let mut z = ctx.tape.div(at, norm)?;
    let eye = ctx.constant(Tensor::eye(g));
    let i7 = ctx.tape.mul_scalar(eye, 7.0);
    let i15 = ctx.tape.mul_scalar(eye, 15.0);
    let i13 = ctx.tape.mul_scalar(eye, 13.0);
    for _ in 0..iterations {
        let az = ctx.tape.matmul(a, z)?;
        let t = ctx.tape.sub(i7, az)?;
        let t = ctx.tape.matmul(az, t)?;
        let t = ctx.tape.sub(i15, t)?;
        let t = ctx.tape.matmul(az, t)?;
        let t = ctx.tape.sub(i13, t)?;
        let zt = ctx.tape.matmul(z, t)?;
        z = ctx.tape.mul_scalar(zt, 0.25);
    }
    Ok(z)
}

/// The three row-stochastic factors `(softmax(Q Kl^T), softmax(Ql Kl^T),
/// softmax(Ql K^T))` for `[b, n, d]` queries and keys, scaled by `1/sqrt(d)`.
pub fn nystrom_factors<T: Real>(ctx: &mut Ctx<T>, q: Var, k: Var, m: usize) -> Result<(Var, Var, Var)> {
    let [_, n, d] = dims3(ctx, q)?;
    let avg = ctx.constant(landmark_matrix(n, m)?);
    let q = ctx.tape.mul_scalar(q, 1.0 / Float::sqrt(d as f64));
    let ql = ctx.tape.matmul(avg, q)?;
    let kl = ctx.tape.matmul(avg, k)?;
    let klt = ctx.tape.transpose(kl)?;
    let kt = ctx.tape.transpose(k)?;
    let f = ctx.tape.matmul(q, klt)?;
    let f = ctx.tape.softmax(f)?;
    let a = ctx.tape.matmul(ql, klt)?;
    let a = ctx.tape.softmax(a)?;
    let b = ctx.tape.matmul(ql, kt)?;
    let b = ctx.tape.softmax(b)?;
    Ok((f, a, b))
}

/// `F pinv(A) (B V)` for `[b, n, d]` inputs.
pub fn nystrom_attention<T: Real>(
    ctx: &mut Ctx<T>,
    q: Var,
    k: Var,
    v: Var,
    m: usize,
    iterations: usize,
) -> Result<Var> {
    let (f, a, b) = nystrom_factors(ctx, q, k, m)?;
    let z = newton_schulz_pinv(ctx, a, iterations)?;
    let bv = ctx.tape.matmul(b, v)?;
    let zbv = ctx.tape.matmul(z, bv)?;
    ctx.tape.matmul(f, zbv)
}

/// `softmax(Q K^T / sqrt(d)) V`.
pub fn exact_attention<T: Real>(ctx: &mut Ctx<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let [_, _, d] = dims3(ctx, q)?;
    let q = ctx.tape.mul_scalar(q, 1.0 / Float::sqrt(d as f64));
    let kt = ctx.tape.transpose(k)?;
    let s = ctx.tape.matmul(q, kt)?;
    let p = ctx.tape.softmax(s)?;
    ctx.tape.matmul(p, v)
}

fn dims3<T: Real>(ctx: &Ctx<T>, v: Var) -> Result<[usize; 3]> {
    match *ctx.shape(v) {
        [b, n, d] => Ok([b, n, d]),
        ref s => Err(Error::shape("attention", format!("expected [batch, seq, dim], got {:?}", s))),
    }
}

/// Attention over the spatial positions of a `[b, d, h, w]` map, with a
/// learned additive position embedding and an output projection.
#[derive(Clone, Debug)]
pub struct NystromAttention {
    pos: ParamId,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    pub dim: usize,
    pub hw: (usize, usize),
    pub landmarks: usize,
    pub iterations: usize,
}

impl NystromAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hw: (usize, usize),
        landmarks: usize,
        iterations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = hw.0 * hw.1;
        if landmarks == 0 || landmarks > n {
            return Err(Error::config(format!(
                "{}: {} landmarks exceed the {} positions of a {}x{} map",
                name, landmarks, n, hw.0, hw.1
            )));
        }
        Ok(NystromAttention {
            pos: store.register(&format!("{}.pos", name), Tensor::randn(&[n, dim], 0.02, rng), true)?,
            q: Linear::new(store, &format!("{}.q", name), dim, dim, rng)?,
            k: Linear::new(store, &format!("{}.k", name), dim, dim, rng)?,
            v: Linear::new(store, &format!("{}.v", name), dim, dim, rng)?,
            out: Linear::new(store, &format!("{}.out", name), dim, dim, rng)?,
            dim,
            hw,
            landmarks,
            iterations,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let [b, d, h, w] = ctx.value(x).dims4("nystrom_attention")?;
        if (h, w) != self.hw || d != self.dim {
            return Err(Error::shape(
                "nystrom_attention",
                format!("built for {}x{:?}, got {}x{}x{}", self.dim, self.hw, d, h, w),
            ));
        }
        let seq = ctx.tape.reshape(x, &[b, d, h * w])?;
        let seq = ctx.tape.transpose(seq)?;
        let pos = ctx.param(self.pos);
        let seq = ctx.tape.add(seq, pos)?;
        let q = self.q.forward(ctx, seq)?;
        let k = self.k.forward(ctx, seq)?;
        let v = self.v.forward(ctx, seq)?;
        let a = nystrom_attention(ctx, q, k, v, self.landmarks, self.iterations)?;
        let o = self.out.forward(ctx, a)?;
        let o = ctx.tape.transpose(o)?;
        ctx.tape.reshape(o, &[b, d, h, w])
    }

    pub fn param_count(&self) -> usize {
        self.hw.0 * self.hw.1 * self.dim
            + self.q.param_count()
            + self.k.param_count()
            + self.v.param_count()
            + self.out.param_count()
    }
}
