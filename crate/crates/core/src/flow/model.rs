use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{FactorPrior, FlowConfig};
use crate::bijections::{
    squeeze, unsqueeze, ActNorm, AffineCoupling, CouplingSide, Dequantizer, FactorOut, InvConv1x1, Latent,
    LikelihoodTerms, Term, TermVars,
};
use crate::cross_unit::{strip, ContextMode, CrossUnit, NoiseMode};
use crate::error::{Error, Result};
use crate::estimator::log_mean_exp;
use crate::noise::NoiseSource;
use crate::params::{Ctx, Mode, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{Tensor, Var};

/// ActNorm, invertible 1x1 convolution and affine coupling.
#[derive(Clone, Debug)]
pub struct GlowModule {
    pub actnorm: ActNorm,
    pub invconv: InvConv1x1,
    pub coupling: AffineCoupling,
}

impl GlowModule {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<(Var, Var)> {
        let (y, l1) = self.actnorm.forward(ctx, x)?;
        let (y, l2) = self.invconv.forward(ctx, y)?;
        let (y, l3) = self.coupling.forward(ctx, y)?;
        let l = ctx.tape.add(l1, l2)?;
        Ok((y, ctx.tape.add(l, l3)?))
    }

    pub fn inverse<T: Real>(&self, ctx: &mut Ctx<T>, y: Var) -> Result<Var> {
        let x = self.coupling.inverse(ctx, y)?;
        let x = self.invconv.inverse(ctx, x)?;
        self.actnorm.inverse(ctx, x)
    }

    pub fn param_count(&self) -> usize {
        self.actnorm.param_count() + self.invconv.param_count() + self.coupling.param_count()
    }
}

#[derive(Clone, Debug)]
pub struct Unit {
    pub modules: Vec<GlowModule>,
    /// Absent for the last unit of a block.
    pub cross: Option<CrossUnit>,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub units: Vec<Unit>,
    /// Squeeze-and-drop after the block; absent for the last block.
    pub factor: Option<FactorOut>,
}

/// Shape and parameter count after one stage of the pipeline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageInfo {
    pub name: String,
    pub shape: [usize; 3],
    pub params: usize,
}

/// Dimension bookkeeping; `input + noise == latent + factored` always holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DimensionAccount {
    pub input: usize,
    pub noise: usize,
    pub latent: usize,
    pub factored: usize,
}

/// The layer structure; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub dequant: Dequantizer,
    pub initial_squeeze: bool,
    pub context: ContextMode,
    pub blocks: Vec<Block>,
    pub final_shape: [usize; 3],
    pub trace: Vec<StageInfo>,
    pub dims: DimensionAccount,
}

/// Everything the forward direction produced for one batch.
pub struct Encoded {
    pub x_cont: Var,
    pub z: Var,
    pub dropped: Vec<Var>,
    pub noises: Vec<Var>,
    pub terms: TermVars,
}

/// Source of the latents on the inverse path.
pub enum Latents<'a, T> {
    /// Exact values recorded by an encode pass, in block order.
    Recorded(&'a [Tensor<T>]),
    /// Draws from the priors scaled by `temperature`.
    Sampled { noise: &'a mut NoiseSource, temperature: f64 },
}

impl Network {
    pub fn build<T: Real>(cfg: &FlowConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::build_with(cfg, store, &mut rng)
    }

    fn build_with<T: Real, R: RngCore>(cfg: &FlowConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let im = cfg.image;
        let k = cfg.effective_growth();
        let mut trace = Vec::new();
        let dequant = Dequantizer::new(store, "dequant", cfg.dequantization, im.channels, rng)?;
        let mut shape = [im.channels, im.height, im.width];
        trace.push(StageInfo { name: "input".into(), shape, params: dequant.param_count() });
        if cfg.initial_squeeze {
            shape = [shape[0] * 4, shape[1] / 2, shape[2] / 2];
            trace.push(StageInfo { name: "squeeze".into(), shape, params: 0 });
        }
        let mut dims = DimensionAccount { input: im.dims(), noise: 0, latent: 0, factored: 0 };
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        let mut module_index = 0usize;
        for (bi, bc) in cfg.blocks.iter().enumerate() {
            let hw = (shape[1], shape[2]);
            let mut context_channels = shape[0];
            let mut units = Vec::with_capacity(bc.units);
            for ui in 0..bc.units {
                let mut modules = Vec::with_capacity(bc.modules_per_unit);
                for mi in 0..bc.modules_per_unit {
                    let name = format!("b{}.u{}.m{}", bi, ui, mi);
                    let c = shape[0];
                    if c < 2 {
                        return Err(Error::config(format!("{}: {} channel(s) cannot be split by a coupling", name, c)));
                    }
                    let side = if module_index.is_multiple_of(2) { CouplingSide::Second } else { CouplingSide::First };
                    module_index += 1;
                    let m = GlowModule {
                        actnorm: ActNorm::new(store, &format!("{}.actnorm", name), c)?,
                        invconv: InvConv1x1::new(store, &format!("{}.invconv", name), c, rng)?,
                        coupling: AffineCoupling::new(
                            store,
                            &format!("{}.coupling", name),
                            c,
                            side,
                            &cfg.coupling,
                            hw,
                            rng,
                        )?,
                    };
                    trace.push(StageInfo { name, shape, params: m.param_count() });
                    modules.push(m);
                }
                let last = ui + 1 == bc.units;
                let cross = if !last && k > 0 {
                    let name = format!("b{}.u{}.cross", bi, ui);
                    let seen = match cfg.context {
                        ContextMode::Dense => context_channels + shape[0],
                        ContextMode::Strict => context_channels,
                    };
                    let cu = CrossUnit::new(
                        store,
                        &name,
                        k,
                        seen,
                        cfg.conditioner_hidden,
                        cfg.noise == NoiseMode::Preconditioned,
                        rng,
                    )?;
                    context_channels += shape[0];
                    dims.noise += k * shape[1] * shape[2];
                    shape[0] += k;
                    trace.push(StageInfo { name, shape, params: cu.param_count() });
                    Some(cu)
                } else {
                    None
                };
                units.push(Unit { modules, cross });
            }
            let factor = if bi + 1 < cfg.blocks.len() {
                let name = format!("b{}.squeeze_drop", bi);
                shape = [shape[0] * 4, shape[1] / 2, shape[2] / 2];
                let f = FactorOut::new(
                    store,
                    &name,
                    shape[0],
                    cfg.factor_prior == FactorPrior::Conditional,
                    rng,
                )?;
                shape[0] /= 2;
                dims.factored += shape[0] * shape[1] * shape[2];
                trace.push(StageInfo { name, shape, params: f.param_count() });
                Some(f)
            } else {
                None
            };
            blocks.push(Block { units, factor });
        }
        dims.latent = shape.iter().product();
        Ok(Network {
            dequant,
            initial_squeeze: cfg.initial_squeeze,
            context: cfg.context,
            blocks,
            final_shape: shape,
            trace,
            dims,
        })
    }

    pub fn param_count(&self) -> usize {
        self.trace.iter().map(|s| s.params).sum()
    }

    /// Data to latents, accumulating every term of the bound.
    pub fn encode<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, noise: &mut NoiseSource) -> Result<Encoded> {
        let mut terms = TermVars::default();
        let (x_cont, corr, lq) = self.dequant.forward(ctx, x, noise)?;
        let dq = ctx.tape.sub(corr, lq)?;
        terms.add(ctx, Term::Dequant, dq)?;
        let mut z = x_cont;
        if self.initial_squeeze {
            z = squeeze(ctx, z)?.0;
        }
        let mut dropped = Vec::new();
        let mut noises = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            let mut context = vec![z];
            for (ui, unit) in block.units.iter().enumerate() {
                for (mi, m) in unit.modules.iter().enumerate() {
                    let (y, ld) = m.forward(ctx, z)?;
                    ctx.check_finite(y, &format!("b{}.u{}.m{}", bi, ui, mi))?;
                    terms.add(ctx, Term::Logdet, ld)?;
                    z = y;
                    release(ctx, &[&[x_cont, z], &context, &dropped, &noises], &terms);
                }
                if let Some(cross) = &unit.cross {
                    let mut seen = context.clone();
                    if self.context == ContextMode::Dense {
                        seen.push(z);
                    }
                    let aug = cross.augment(ctx, z, &seen, noise)?;
                    ctx.check_finite(aug.z_aug, &format!("b{}.u{}.cross", bi, ui))?;
                    terms.add(ctx, Term::Noise, aug.delta)?;
                    noises.push(aug.e);
                    context.push(z);
                    z = aug.z_aug;
                }
            }
            if let Some(f) = &block.factor {
                let (s, _) = squeeze(ctx, z)?;
                let (zr, zd, lp) = f.forward(ctx, s)?;
                terms.add(ctx, Term::Prior, lp)?;
                dropped.push(zd);
                z = zr;
            }
        }
        let lp = crate::bijections::gaussian_log_prob(ctx, z, None)?;
        terms.add(ctx, Term::Prior, lp)?;
        Ok(Encoded { x_cont, z, dropped, noises, terms })
    }

    /// Latents to continuous data. Cross-unit conditioners are never run.
    pub fn decode<T: Real>(&self, ctx: &mut Ctx<T>, z: Var, mut latents: Latents<'_, T>) -> Result<Var> {
        let mut z = z;
        let factored = self.blocks.iter().filter(|b| b.factor.is_some()).count();
        if let Latents::Recorded(r) = &latents {
            if r.len() != factored {
                return Err(Error::Contract(format!("{} recorded latents for {} factor-out points", r.len(), factored)));
            }
        }
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            if let Some(f) = &block.factor {
                let latent = match &mut latents {
                    Latents::Recorded(r) => Latent::Given(ctx.constant(r[bi].clone())),
                    Latents::Sampled { noise, temperature } => Latent::Sample { noise, temperature: *temperature },
                };
                let s = f.inverse(ctx, z, latent)?;
                z = unsqueeze(ctx, s)?;
                ctx.tape.release(&[z]);
            }
            for unit in block.units.iter().rev() {
                if let Some(cross) = &unit.cross {
                    z = strip(ctx, z, cross.k)?;
                }
                for m in unit.modules.iter().rev() {
                    z = m.inverse(ctx, z)?;
                    ctx.tape.release(&[z]);
                }
            }
        }
        if self.initial_squeeze {
            z = unsqueeze(ctx, z)?;
        }
        Ok(z)
    }

    /// Every invertible-convolution layer, for monitoring.
    pub fn invconvs(&self) -> impl Iterator<Item = &InvConv1x1> {
        self.blocks.iter().flat_map(|b| b.units.iter()).flat_map(|u| u.modules.iter()).map(|m| &m.invconv)
    }

    pub fn modules(&self) -> impl Iterator<Item = &GlowModule> {
        self.blocks.iter().flat_map(|b| b.units.iter()).flat_map(|u| u.modules.iter())
    }
}

/// Frees dead intermediates of a pass without gradients.
fn release<T: Real>(ctx: &mut Ctx<T>, groups: &[&[Var]], terms: &TermVars) {
    let mut live: Vec<Var> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    live.extend([terms.logdet, terms.noise, terms.prior, terms.dequant].into_iter().flatten());
    ctx.tape.release(&live);
}

/// Result of a forward bound evaluation.
#[derive(Clone, Debug)]
pub struct Bound {
    /// Per-example bound in nats (log-mean-exp over the Monte-Carlo draws).
    pub bound: Vec<f64>,
    /// Per-example bound of the first draw alone.
    pub single: Vec<f64>,
    /// Components averaged over the draws.
    pub terms: LikelihoodTerms,
}

/// Gradients and diagnostics of one training loss evaluation.
pub struct LossGrad<T> {
    /// Mean negative bound in bits per dimension.
    pub loss: f64,
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub min_scale: f64,
}

/// Recorded latents of an encode pass.
#[derive(Clone, Debug)]
pub struct Encoding<T> {
    pub x_cont: Tensor<T>,
    pub z: Tensor<T>,
    pub dropped: Vec<Tensor<T>>,
    pub noises: Vec<Tensor<T>>,
    pub terms: LikelihoodTerms,
}

/// A built model: configuration, structure and parameter values.
#[derive(Clone, Debug)]
pub struct FlowModel<T> {
    pub config: FlowConfig,
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Real> FlowModel<T> {
    pub fn build(config: &FlowConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::build(config, &mut store)?;
        Ok(FlowModel { config: config.clone(), net, store })
    }

    /// Data dimension `c * h * w`.
    pub fn dims(&self) -> usize {
        self.config.image.dims()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let [b, c, h, w] = x.dims4("flow input")?;
        let im = self.config.image;
        if (c, h, w) != (im.channels, im.height, im.width) {
            return Err(Error::shape(
                "flow input",
                format!("model expects {}x{}x{} images, got {}x{}x{}", im.channels, im.height, im.width, c, h, w),
            ));
        }
        Ok(b)
    }

    /// One draw of the bound for every example.
    pub fn bound_once(&mut self, x: &Tensor<T>, noise: &mut NoiseSource, mode: Mode) -> Result<LikelihoodTerms> {
        let b = self.check_input(x)?;
        let mut ctx = Ctx::new(&mut self.store, mode);
        let xv = ctx.constant(x.clone());
        let enc = self.net.encode(&mut ctx, xv, noise)?;
        let terms = enc.terms.read(&ctx, b);
        if !terms.is_finite() {
            return Err(Error::NonFinite { stage: "bound".into(), min_scale: ctx.min_scale() });
        }
        Ok(terms)
    }

    /// Monte-Carlo bound: log-mean-exp over `mc_samples` joint draws of all
    /// noises, in evaluation mode.
    pub fn forward_bound<R: RngCore + ?Sized>(
        &mut self,
        x: &Tensor<T>,
        rng: &mut R,
        mc_samples: usize,
    ) -> Result<Bound> {
        if mc_samples == 0 {
            return Err(Error::Contract("mc_samples must be at least 1".into()));
        }
        let b = self.check_input(x)?;
        let mut draws: Vec<Vec<f64>> = Vec::with_capacity(mc_samples);
        let mut mean = LikelihoodTerms {
            logdet: vec![0.0; b],
            noise: vec![0.0; b],
            prior: vec![0.0; b],
            dequant: vec![0.0; b],
        };
        for _ in 0..mc_samples {
            let mut noise = NoiseSource::from_rng(rng, b);
            let t = self.bound_once(x, &mut noise, Mode::Eval)?;
            let scale = 1.0 / mc_samples as f64;
            for i in 0..b {
                mean.logdet[i] += t.logdet[i] * scale;
                mean.noise[i] += t.noise[i] * scale;
                mean.prior[i] += t.prior[i] * scale;
                mean.dequant[i] += t.dequant[i] * scale;
            }
            draws.push(t.total());
        }
        let bound = (0..b).map(|i| log_mean_exp(draws.iter().map(|d| d[i]))).collect();
        Ok(Bound { bound, single: draws[0].clone(), terms: mean })
    }

    /// Training loss (mean negative bound in bits/dim) and its gradients.
    pub fn loss_and_grads(&mut self, x: &Tensor<T>, noise: &mut NoiseSource) -> Result<LossGrad<T>> {
        let b = self.check_input(x)?;
        let d = self.dims() as f64;
        let mut ctx = Ctx::with_grads(&mut self.store, Mode::Train);
        let xv = ctx.constant(x.clone());
        let enc = self.net.encode(&mut ctx, xv, noise)?;
        let total = enc.terms.total(&mut ctx, b)?;
        let sum = ctx.tape.sum_all(total);
        let loss = ctx.tape.mul_scalar(sum, -1.0 / (b as f64 * d * core::f64::consts::LN_2));
        let lv = ctx.value(loss).data()[0].as_f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite { stage: "loss".into(), min_scale: ctx.min_scale() });
        }
        let g = ctx.tape.backward(loss)?;
        let grads = g.params().map(|(id, t)| (id, t.clone())).collect();
        Ok(LossGrad { loss: lv, grads, min_scale: ctx.min_scale() })
    }

    /// True once every ActNorm layer has seen its initialization batch.
    pub fn is_initialized(&self) -> bool {
        self.net.modules().all(|m| m.actnorm.is_initialized(&self.store))
    }

    /// Runs a training-mode forward pass so that ActNorm layers initialize
    /// from `x`.
    pub fn initialize(&mut self, x: &Tensor<T>, noise: &mut NoiseSource) -> Result<()> {
        self.bound_once(x, noise, Mode::Train).map(|_| ())
    }

    /// Forward pass in evaluation mode, keeping every latent.
    pub fn encode(&mut self, x: &Tensor<T>, noise: &mut NoiseSource) -> Result<Encoding<T>> {
        let b = self.check_input(x)?;
        let mut ctx = Ctx::new(&mut self.store, Mode::Eval);
        let xv = ctx.constant(x.clone());
        let enc = self.net.encode(&mut ctx, xv, noise)?;
        Ok(Encoding {
            x_cont: ctx.value(enc.x_cont).clone(),
            z: ctx.value(enc.z).clone(),
            dropped: enc.dropped.iter().map(|&v| ctx.value(v).clone()).collect(),
            noises: enc.noises.iter().map(|&v| ctx.value(v).clone()).collect(),
            terms: enc.terms.read(&ctx, b),
        })
    }

    /// Inverts an encoding with its recorded latents; returns continuous data.
    pub fn decode(&mut self, z: &Tensor<T>, dropped: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(&mut self.store, Mode::Eval);
        let zv = ctx.constant(z.clone());
        let x = self.net.decode(&mut ctx, zv, Latents::Recorded(dropped))?;
        Ok(ctx.value(x).clone())
    }

    /// Draws `n` images with all prior scales multiplied by `temperature`.
    /// Returns pixel values in `0..=255` and the number of conditioner calls
    /// made (always zero).
    pub fn sample<R: RngCore + ?Sized>(&mut self, n: usize, temperature: f64, rng: &mut R) -> Result<(Tensor<T>, usize)> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::Contract(format!("temperature must be finite and non-negative, got {}", temperature)));
        }
        let mut noise = NoiseSource::from_rng(rng, n);
        let [c, h, w] = self.net.final_shape;
        let mut ctx = Ctx::new(&mut self.store, Mode::Eval);
        let eps = noise.normal::<T>(&[c, h, w]);
        let z = ctx.constant(eps);
        let z = ctx.tape.mul_scalar(z, temperature);
        let x = self.net.decode(&mut ctx, z, Latents::Sampled { noise: &mut noise, temperature })?;
        ctx.check_finite(x, "sample")?;
        let calls = ctx.conditioner_calls();
        Ok((Dequantizer::quantize(ctx.value(x)), calls))
    }
}
