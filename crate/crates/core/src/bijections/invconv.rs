use alloc::format;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use num_traits::Float;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::per_example;
use crate::error::Result;
use crate::params::{Ctx, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{Tensor, Var};

/// Invertible 1x1 convolution with `W = P L (U + diag(sign * exp(log_s)))`.
///
/// `P` and the signs are fixed buffers; the strictly triangular parts of `L`
/// and `U` and the log-magnitudes are trained.
#[derive(Clone, Debug)]
pub struct InvConv1x1 {
    perm: ParamId,
    sign: ParamId,
    lower: ParamId,
    upper: ParamId,
    log_s: ParamId,
    pub channels: usize,
}

impl InvConv1x1 {
    /// Starts from a random orthogonal matrix, factored by LU with partial pivoting.
    pub fn new<T: Real, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = DMatrix::<f64>::from_fn(c, c, |_, _| rng.sample(StandardNormal));
        let q = g.qr().q();
        let lu = q.lu();
        let (l, u) = (lu.l(), lu.u());
        let mut p = DMatrix::<f64>::identity(c, c);
        lu.p().inv_permute_rows(&mut p);
        let strict = |m: &DMatrix<f64>, lower: bool| {
            Tensor::from_fn(&[c, c], |k| {
                let (i, j) = (k / c, k % c);
                if (lower && i > j) || (!lower && i < j) {
                    T::of(m[(i, j)])
                } else {
                    T::zero()
                }
            })
        };
        let diag: Vec<f64> = (0..c).map(|i| u[(i, i)]).collect();
        let sign = Tensor::from_fn(&[c], |i| T::of(if diag[i] < 0.0 { -1.0 } else { 1.0 }));
        let log_s = Tensor::from_fn(&[c], |i| T::of(Float::ln(Float::abs(diag[i]))));
        Ok(InvConv1x1 {
            perm: store.register(&format!("{}.perm", name), Tensor::from_fn(&[c, c], |k| T::of(p[(k / c, k % c)])), false)?,
            sign: store.register(&format!("{}.sign", name), sign, false)?,
            lower: store.register(&format!("{}.lower", name), strict(&l, true), true)?,
            upper: store.register(&format!("{}.upper", name), strict(&u, false), true)?,
            log_s: store.register(&format!("{}.log_s", name), log_s, true)?,
            channels: c,
        })
    }

    fn masks<T: Real>(c: usize) -> (Tensor<T>, Tensor<T>) {
        let lower = Tensor::from_fn(&[c, c], |k| if k / c > k % c { T::one() } else { T::zero() });
        let upper = Tensor::from_fn(&[c, c], |k| if k / c < k % c { T::one() } else { T::zero() });
        (lower, upper)
    }

    /// Assembles `W` on the tape.
    fn weight<T: Real>(&self, ctx: &mut Ctx<T>) -> Result<Var> {
        let c = self.channels;
        let (ml, mu) = Self::masks::<T>(c);
        let (ml, mu) = (ctx.constant(ml), ctx.constant(mu));
        let eye = ctx.constant(Tensor::eye(c));
        let l = ctx.param(self.lower);
        let l = ctx.tape.mul(l, ml)?;
        let l = ctx.tape.add(l, eye)?;
        let u = ctx.param(self.upper);
        let u = ctx.tape.mul(u, mu)?;
        let ls = ctx.param(self.log_s);
        let mag = ctx.tape.exp(ls);
        let sign = ctx.param(self.sign);
        let s = ctx.tape.mul(mag, sign)?;
        let s = ctx.tape.reshape(s, &[1, c])?;
        let d = ctx.tape.mul(eye, s)?;
        let ud = ctx.tape.add(u, d)?;
        let lud = ctx.tape.matmul(l, ud)?;
        let p = ctx.param(self.perm);
        ctx.tape.matmul(p, lud)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<(Var, Var)> {
        let [b, _, h, w] = ctx.value(x).dims4("inv_conv1x1")?;
        let c = self.channels;
        let min_s = ctx.store().get(self.log_s).data().iter().fold(f64::INFINITY, |m, v| m.min(Float::exp(v.as_f64())));
        ctx.note_scale(min_s);
        let wm = self.weight(ctx)?;
        let k = ctx.tape.reshape(wm, &[c, c, 1, 1])?;
        let y = ctx.tape.conv2d(x, k, 0)?;
        let ls = ctx.param(self.log_s);
        let total = ctx.tape.sum_all(ls);
        let total = ctx.tape.mul_scalar(total, (h * w) as f64);
        Ok((y, per_example(ctx, total, b)?))
    }

    pub fn inverse<T: Real>(&self, ctx: &mut Ctx<T>, y: Var) -> Result<Var> {
        let c = self.channels;
        let winv = self.inverse_matrix(ctx.store());
        let k = Tensor::from_fn(&[c, c, 1, 1], |i| T::of(winv[(i / c, i % c)]));
        let k = ctx.constant(k);
        ctx.tape.conv2d(y, k, 0)
    }

    fn factors<T: Real>(&self, store: &ParamStore<T>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let c = self.channels;
        let at = |id: ParamId, i: usize, j: usize| store.get(id).data()[i * c + j].as_f64();
        let p = DMatrix::from_fn(c, c, |i, j| at(self.perm, i, j));
        let l = DMatrix::from_fn(c, c, |i, j| match i.cmp(&j) {
            core::cmp::Ordering::Greater => at(self.lower, i, j),
            core::cmp::Ordering::Equal => 1.0,
            core::cmp::Ordering::Less => 0.0,
        });
        let sign = store.get(self.sign).data();
        let ls = store.get(self.log_s).data();
        let u = DMatrix::from_fn(c, c, |i, j| match i.cmp(&j) {
            core::cmp::Ordering::Less => at(self.upper, i, j),
            core::cmp::Ordering::Equal => sign[i].as_f64() * Float::exp(ls[i].as_f64()),
            core::cmp::Ordering::Greater => 0.0,
        });
        (p, l, u)
    }

    /// `W` in 64-bit, from the stored factors.
    pub fn weight_matrix<T: Real>(&self, store: &ParamStore<T>) -> DMatrix<f64> {
        let (p, l, u) = self.factors(store);
        p * l * u
    }

    /// `W^-1 = (U + D)^-1 L^-1 P^T` by triangular solves.
    pub fn inverse_matrix<T: Real>(&self, store: &ParamStore<T>) -> DMatrix<f64> {
        let c = self.channels;
        let (p, l, u) = self.factors(store);
        let eye = DMatrix::<f64>::identity(c, c);
        let linv = l.solve_lower_triangular(&eye).expect("unit lower triangular");
        let uinv = u.solve_upper_triangular(&eye).expect("nonzero diagonal by construction");
        uinv * linv * p.transpose()
    }

    pub fn param_count(&self) -> usize {
        self.channels * self.channels
    }

    pub fn log_s_id(&self) -> ParamId {
        self.log_s
    }
}
