//! The property suite behind `denseflow verify`: round trips, Jacobian
//! log-determinants, gradients, the cross-unit bound, Nyström fidelity,
//! dimension accounting and file-format round trips.

use std::fmt;
use std::time::Instant;

use denseflow_core::bijections::{squeeze, unsqueeze, ActNorm, AffineCoupling, CouplingSide, Dequantizer, FactorOut, InvConv1x1, Latent};
use denseflow_core::check::{log_abs_det, numeric_jacobian, rel_err, rel_err_vec};
use denseflow_core::coupling_net::{exact_attention, nystrom_attention, CouplingKind, CouplingNetConfig, DenseBlock};
use denseflow_core::cross_unit::{augment_with, strip, CrossUnit, NoiseMode};
use denseflow_core::data::{synth_textures, ImageDataset, Split};
use denseflow_core::estimator::log_mean_exp;
use denseflow_core::flow::{DimensionAccount, FlowConfig, FlowModel, GlowModule};
use denseflow_core::noise::NoiseSource;
use denseflow_core::params::{Ctx, Mode, ParamStore};
use denseflow_core::real::{DType, Real, LN_2PI};
use denseflow_core::tensor::{Tensor, Var};
use denseflow_core::trainer::{TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::format::{decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset};

type R<T> = Result<T, String>;
type PairMap<'a> = dyn Fn(&mut Ctx<f64>, Var) -> denseflow_core::error::Result<(Var, Var)> + 'a;
type LossMap<'a> = dyn Fn(&mut Ctx<f64>, &[Var]) -> denseflow_core::error::Result<Var> + 'a;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Reported but not counted towards the suite's verdict.
    pub informational: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match (self.informational, self.passed) {
            (true, _) => "INFO",
            (false, true) => "PASS",
            (false, false) => "FAIL",
        };
        write!(f, "{} {}: {} ({:.1}s)", tag, self.name, self.detail, self.seconds)
    }
}

fn run(name: &str, f: impl FnOnce() -> R<(bool, String)>) -> Check {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {}", e)));
    Check { name: name.to_string(), passed, informational: false, detail, seconds: t.elapsed().as_secs_f64() }
}

/// Sample sizes of the suite.
#[derive(Clone, Debug)]
pub struct SuiteSize {
    /// Random inputs per bijection round trip.
    pub inverse_inputs: usize,
    /// Include the published presets in the model round trips.
    pub paper_presets: bool,
    pub grad_coords: usize,
    pub bound_samples: usize,
    pub bound_trials: usize,
    pub nystrom_trials: usize,
}

impl SuiteSize {
    pub fn full() -> Self {
        SuiteSize {
            inverse_inputs: 1000,
            paper_presets: true,
            grad_coords: 16,
            bound_samples: 10_000,
            bound_trials: 200,
            nystrom_trials: 100,
        }
    }

    /// Small sizes for unit tests of the suite itself.
    pub fn quick() -> Self {
        SuiteSize {
            inverse_inputs: 16,
            paper_presets: false,
            grad_coords: 4,
            bound_samples: 1000,
            bound_trials: 20,
            nystrom_trials: 10,
        }
    }
}

fn core_err(e: denseflow_core::error::Error) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Round-trip tolerance for the precision.
pub fn inverse_tolerance<T: Real>() -> f64 {
    match T::DTYPE {
        DType::F32 => 1e-4,
        DType::F64 => 1e-8,
    }
}

fn dtype_name<T: Real>() -> &'static str {
    match T::DTYPE {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

/// Adds `N(0, std^2)` to every trainable value so that zero-initialized
/// layers stop being identities.
pub fn perturb<T: Real>(store: &mut ParamStore<T>, std: f64, seed: u64) {
    let mut r = rng(seed);
    for id in store.trainable_ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += T::of(std * normal(&mut r));
        }
    }
}

fn max_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.max_abs_diff(b).as_f64()
}

// ---------------------------------------------------------------- round trips

type Layer<T> = Box<dyn Fn(&mut Ctx<T>, Var) -> denseflow_core::error::Result<Var>>;

/// One bijection under test: name, store, forward and inverse.
struct Bijection<T> {
    name: &'static str,
    store: ParamStore<T>,
    fwd: Layer<T>,
    inv: Layer<T>,
}

fn coupling_cfg(kind: CouplingKind) -> CouplingNetConfig {
    CouplingNetConfig { kind, glow_hidden: 16, ..CouplingNetConfig::desk() }
}

fn bijections<T: Real + 'static>(x: &Tensor<T>, seed: u64) -> R<Vec<Bijection<T>>> {
    let [_, c, h, w] = x.dims4("bijections").map_err(core_err)?;
    let mut r = rng(seed);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let an = ActNorm::new(&mut store, "actnorm", c).map_err(core_err)?;
    let shifted = x.map(|v| v * T::of(3.0) + T::of(1.5));
    an.initialize(&mut store, &shifted).map_err(core_err)?;
    perturb(&mut store, 0.1, seed);
    let (a1, a2) = (an.clone(), an);
    out.push(Bijection {
        name: "actnorm",
        store,
        fwd: Box::new(move |ctx, x| Ok(a1.forward(ctx, x)?.0)),
        inv: Box::new(move |ctx, y| a2.inverse(ctx, y)),
    });

    let mut store = ParamStore::new();
    let ic = InvConv1x1::new(&mut store, "invconv", c, &mut r).map_err(core_err)?;
    perturb(&mut store, 0.1, seed + 1);
    let (i1, i2) = (ic.clone(), ic);
    out.push(Bijection {
        name: "inv_conv1x1",
        store,
        fwd: Box::new(move |ctx, x| Ok(i1.forward(ctx, x)?.0)),
        inv: Box::new(move |ctx, y| i2.inverse(ctx, y)),
    });

    for (name, kind, side) in [
        ("affine_coupling/glow", CouplingKind::Glow, CouplingSide::Second),
        ("affine_coupling/dense", CouplingKind::Dense, CouplingSide::First),
        ("affine_coupling/fusion", CouplingKind::Fusion, CouplingSide::Second),
    ] {
        let mut store = ParamStore::new();
        let cp = AffineCoupling::new(&mut store, "coupling", c, side, &coupling_cfg(kind), (h, w), &mut r)
            .map_err(core_err)?;
        perturb(&mut store, 0.05, seed + 2);
        let (c1, c2) = (cp.clone(), cp);
        out.push(Bijection {
            name,
            store,
            fwd: Box::new(move |ctx, x| Ok(c1.forward(ctx, x)?.0)),
            inv: Box::new(move |ctx, y| c2.inverse(ctx, y)),
        });
    }

    out.push(Bijection {
        name: "squeeze",
        store: ParamStore::new(),
        fwd: Box::new(|ctx, x| Ok(squeeze(ctx, x)?.0)),
        inv: Box::new(unsqueeze),
    });

    // the dropped half is carried through the tape between the two closures
    // by concatenating it back, which is exactly the inverse contract
    let mut store = ParamStore::new();
    let fo = FactorOut::new(&mut store, "factor", c, true, &mut r).map_err(core_err)?;
    perturb(&mut store, 0.1, seed + 3);
    let (f1, f2) = (fo.clone(), fo);
    out.push(Bijection {
        name: "factor_out",
        store,
        fwd: Box::new(move |ctx, x| {
            let (zr, zd, _) = f1.forward(ctx, x)?;
            ctx.tape.concat(&[zr, zd], 1)
        }),
        inv: Box::new(move |ctx, y| {
            let half = f2.channels / 2;
            let (zr, zd) = ctx.tape.split_channels(y, half)?;
            f2.inverse(ctx, zr, Latent::Given(zd))
        }),
    });

    let mut store = ParamStore::new();
    let cu = CrossUnit::new(&mut store, "cross", 3, c, 8, true, &mut r).map_err(core_err)?;
    perturb(&mut store, 0.1, seed + 4);
    let b = x.shape()[0];
    out.push(Bijection {
        name: "cross_unit",
        store,
        fwd: Box::new(move |ctx, x| {
            let mut noise = NoiseSource::from_keys(seed, &(0..b as u64).collect::<Vec<_>>());
            Ok(cu.augment(ctx, x, &[x], &mut noise)?.z_aug)
        }),
        inv: Box::new(|ctx, y| strip(ctx, y, 3)),
    });
    Ok(out)
}

/// Max-abs round-trip error of every bijection on `n` random inputs.
pub fn bijection_round_trips<T: Real + 'static>(n: usize, seed: u64) -> R<Vec<(String, f64)>> {
    let mut r = rng(seed);
    let x = Tensor::<T>::from_fn(&[n, 4, 4, 4], |_| T::of(2.0 * normal(&mut r)));
    let mut out = Vec::new();
    for mut bj in bijections(&x, seed)? {
        let mut ctx = Ctx::new(&mut bj.store, Mode::Eval);
        let xv = ctx.constant(x.clone());
        let y = (bj.fwd)(&mut ctx, xv).map_err(core_err)?;
        let xr = (bj.inv)(&mut ctx, y).map_err(core_err)?;
        out.push((bj.name.to_string(), max_diff(ctx.value(xr), &x)));
    }
    for mode in [denseflow_core::bijections::DequantMode::Uniform, denseflow_core::bijections::DequantMode::Variational] {
        let mut store = ParamStore::<T>::new();
        let dq = Dequantizer::new(&mut store, "dequant", mode, 3, &mut r).map_err(core_err)?;
        perturb(&mut store, 0.1, seed + 5);
        let px = Tensor::<T>::from_fn(&[n, 3, 4, 4], |_| T::of(r.random_range(0..256) as f64));
        let mut ctx = Ctx::new(&mut store, Mode::Eval);
        let xv = ctx.constant(px.clone());
        let mut noise = NoiseSource::from_keys(seed, &(0..n as u64).collect::<Vec<_>>());
        let (xc, _, _) = dq.forward(&mut ctx, xv, &mut noise).map_err(core_err)?;
        let back = Dequantizer::quantize(ctx.value(xc));
        out.push((format!("dequantize/{:?}", mode).to_lowercase(), max_diff(&back, &px)));
    }
    Ok(out)
}

/// Round-trip error of a whole model on `n` inputs, processed in chunks.
/// ActNorm is initialized from data and all parameters are perturbed first.
pub fn model_round_trip<T: Real>(cfg: &FlowConfig, n: usize, perturbation: f64, seed: u64) -> R<f64> {
    let im = cfg.image;
    let mut model = FlowModel::<T>::build(cfg).map_err(core_err)?;
    let data = synth_textures(n.max(2), im.height, im.width, im.channels, seed).map_err(core_err)?;
    let init: Vec<usize> = (0..data.count.min(32)).collect();
    let xi = data.batch::<T>(&init, None).map_err(core_err)?;
    model.initialize(&xi, &mut NoiseSource::from_keys(seed, &[0; 32][..init.len()])).map_err(core_err)?;
    perturb(&mut model.store, perturbation, seed);
    let mut worst = 0.0f64;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(100) {
        let x = data.batch::<T>(chunk, None).map_err(core_err)?;
        let keys: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
        let enc = model.encode(&x, &mut NoiseSource::from_keys(seed, &keys)).map_err(core_err)?;
        let xr = model.decode(&enc.z, &enc.dropped).map_err(core_err)?;
        worst = worst.max(max_diff(&xr, &enc.x_cont));
    }
    Ok(worst)
}

// ---------------------------------------------------------------- Jacobians

/// `(analytic, numeric)` log-determinants of a single-example map.
fn logdet_pair(
    store: &mut ParamStore<f64>,
    shape: &[usize],
    x: &[f64],
    f: &PairMap<'_>,
) -> R<(f64, f64)> {
    let eval = |store: &mut ParamStore<f64>, x: &[f64]| -> R<(Vec<f64>, f64)> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let xv = ctx.constant(Tensor::new(shape, x.to_vec()).map_err(core_err)?);
        let (y, ld) = f(&mut ctx, xv).map_err(core_err)?;
        Ok((ctx.value(y).data().to_vec(), ctx.value(ld).data()[0]))
    };
    let (_, analytic) = eval(store, x)?;
    let mut failure = None;
    let jac = numeric_jacobian(x, 1e-6, |xp| match eval(store, xp) {
        Ok((y, _)) => y,
        Err(e) => {
            failure = Some(e);
            vec![0.0; x.len()]
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((analytic, log_abs_det(&jac)))
}

fn glow_module(store: &mut ParamStore<f64>, name: &str, c: usize, side: CouplingSide, r: &mut ChaCha8Rng) -> R<GlowModule> {
    Ok(GlowModule {
        actnorm: ActNorm::new(store, &format!("{}.actnorm", name), c).map_err(core_err)?,
        invconv: InvConv1x1::new(store, &format!("{}.invconv", name), c, r).map_err(core_err)?,
        coupling: AffineCoupling::new(store, &format!("{}.coupling", name), c, side, &coupling_cfg(CouplingKind::Glow), (3, 3), r)
            .map_err(core_err)?,
    })
}

/// Relative error of the analytic log-determinant for each layer.
pub fn jacobian_checks(seed: u64) -> R<Vec<(String, f64, f64)>> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, (a, n): (f64, f64)| out.push((name.to_string(), a, n));

    let shape = [1, 3, 4, 4];
    let x: Vec<f64> = (0..48).map(|_| normal(&mut r)).collect();
    let mut store = ParamStore::new();
    let an = ActNorm::new(&mut store, "actnorm", 3).map_err(core_err)?;
    let init = Tensor::from_fn(&[8, 3, 4, 4], |i| 0.5 * (i % 7) as f64 - 1.0 + 0.01 * i as f64);
    an.initialize(&mut store, &init).map_err(core_err)?;
    perturb(&mut store, 0.2, seed);
    push("actnorm", logdet_pair(&mut store, &shape, &x, &|ctx, v| an.forward(ctx, v))?);

    let mut store = ParamStore::new();
    let ic = InvConv1x1::new(&mut store, "invconv", 3, &mut r).map_err(core_err)?;
    perturb(&mut store, 0.2, seed + 1);
    push("inv_conv1x1", logdet_pair(&mut store, &shape, &x, &|ctx, v| ic.forward(ctx, v))?);

    let shape = [1, 4, 3, 3];
    let x: Vec<f64> = (0..36).map(|_| normal(&mut r)).collect();
    let mut store = ParamStore::new();
    let cp = AffineCoupling::new(&mut store, "coupling", 4, CouplingSide::Second, &coupling_cfg(CouplingKind::Glow), (3, 3), &mut r)
        .map_err(core_err)?;
    perturb(&mut store, 0.1, seed + 2);
    push("affine_coupling", logdet_pair(&mut store, &shape, &x, &|ctx, v| cp.forward(ctx, v))?);

    let mut store = ParamStore::new();
    let mut mods = Vec::new();
    for (i, side) in [CouplingSide::Second, CouplingSide::First, CouplingSide::Second].into_iter().enumerate() {
        mods.push(glow_module(&mut store, &format!("m{}", i), 4, side, &mut r)?);
    }
    let init = Tensor::from_fn(&[8, 4, 3, 3], |i| ((i * 37) % 11) as f64 * 0.3 - 1.5);
    for m in &mods {
        m.actnorm.initialize(&mut store, &init).map_err(core_err)?;
    }
    perturb(&mut store, 0.1, seed + 3);
    let flow = |ctx: &mut Ctx<f64>, v: Var| {
        let mut z = v;
        let mut total = None;
        for m in &mods {
            let (y, ld) = m.forward(ctx, z)?;
            total = Some(match total {
                None => ld,
                Some(t) => ctx.tape.add(t, ld)?,
            });
            z = y;
        }
        Ok((z, total.expect("three modules")))
    };
    push("glow_flow_3_modules", logdet_pair(&mut store, &shape, &x, &flow)?);
    Ok(out)
}

// ---------------------------------------------------------------- gradients

fn gather(store: &ParamStore<f64>) -> Vec<f64> {
    store.trainable_ids().flat_map(|id| store.get(id).data().to_vec()).collect()
}

fn scatter(store: &mut ParamStore<f64>, flat: &[f64]) {
    let mut off = 0;
    for id in store.trainable_ids().collect::<Vec<_>>() {
        let t = store.get_mut(id).data_mut();
        t.copy_from_slice(&flat[off..off + t.len()]);
        off += t.len();
    }
}

fn flat_grads(store: &ParamStore<f64>, grads: &[(denseflow_core::params::ParamId, Tensor<f64>)]) -> Vec<f64> {
    store
        .trainable_ids()
        .flat_map(|id| match grads.iter().find(|(g, _)| *g == id) {
            Some((_, t)) => t.data().to_vec(),
            None => vec![0.0; store.get(id).numel()],
        })
        .collect()
}

/// Worst relative error between `analytic` and central differences of `f`
/// over `n` sampled coordinates.
fn compare_sampled(analytic: &[f64], x0: &[f64], n: usize, seed: u64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut r = rng(seed);
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst = 0.0f64;
    let mut x = x0.to_vec();
    for _ in 0..n {
        let i = r.random_range(0..x0.len());
        let eps = 1e-5 * x0[i].abs().max(1.0);
        x[i] = x0[i] + eps;
        let hi = f(&x);
        x[i] = x0[i] - eps;
        let lo = f(&x);
        x[i] = x0[i];
        let fd = (hi - lo) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], fd, 1e-6 * scale.max(1e-12)));
    }
    worst
}

/// `sum(w * y)` for a fixed random `w`, plus its gradient with respect to
/// the input and all trainable parameters.
fn weighted_loss(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    wseed: u64,
    grads: bool,
    f: &LossMap<'_>,
) -> R<(f64, Vec<f64>, Vec<f64>)> {
    let mut ctx = if grads { Ctx::with_grads(store, Mode::Train) } else { Ctx::new(store, Mode::Train) };
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if grads { ctx.tape.variable(t.clone()) } else { ctx.constant(t.clone()) })
        .collect();
    let y = f(&mut ctx, &vars).map_err(core_err)?;
    let mut r = rng(wseed);
    let w = Tensor::from_fn(ctx.shape(y), |_| normal(&mut r));
    let wv = ctx.constant(w);
    let p = ctx.tape.mul(y, wv).map_err(core_err)?;
    let loss = ctx.tape.sum_all(p);
    let lv = ctx.value(loss).data()[0];
    if !grads {
        return Ok((lv, Vec::new(), Vec::new()));
    }
    let g = ctx.tape.backward(loss).map_err(core_err)?;
    let gin: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| g.wrt(v).map_or(vec![0.0; t.numel()], |gt| gt.data().to_vec()))
        .collect();
    let pg: Vec<_> = g.params().map(|(id, t)| (id, t.clone())).collect();
    drop(ctx);
    let gp = flat_grads(store, &pg);
    Ok((lv, gin, gp))
}

/// Checks gradients of a layer with respect to its inputs and parameters.
fn layer_grad_check(
    mut store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    coords: usize,
    seed: u64,
    f: &LossMap<'_>,
) -> R<f64> {
    let (_, gin, gp) = weighted_loss(&mut store, &inputs, seed, true, f)?;
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let xin: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let p0 = gather(&store);
    let split = |flat: &[f64]| -> Vec<Tensor<f64>> {
        let mut off = 0;
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s, flat[off..off + n].to_vec()).expect("shape");
                off += n;
                t
            })
            .collect()
    };
    let mut worst = compare_sampled(&gin, &xin, coords, seed + 1, |x| {
        weighted_loss(&mut store, &split(x), seed, false, f).map_or(f64::NAN, |r| r.0)
    });
    if !p0.is_empty() {
        let e = compare_sampled(&gp, &p0, coords, seed + 2, |p| {
            scatter(&mut store, p);
            weighted_loss(&mut store, &inputs, seed, false, f).map_or(f64::NAN, |r| r.0)
        });
        scatter(&mut store, &p0);
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Worst relative gradient error per component.
pub fn gradient_checks(coords: usize, seed: u64) -> R<Vec<(String, f64)>> {
    let mut r = rng(seed);
    let mut rand_t = |shape: &[usize]| Tensor::from_fn(shape, |_| normal(&mut r));
    let mut out = Vec::new();

    let x = rand_t(&[2, 3, 5, 5]);
    let k = rand_t(&[4, 3, 3, 3]);
    let e = layer_grad_check(ParamStore::new(), vec![x, k], coords, seed, &|ctx, v| ctx.tape.conv2d(v[0], v[1], 1))?;
    out.push(("conv2d".to_string(), e));

    let mut store = ParamStore::new();
    let mut pr = rng(seed + 10);
    let db = DenseBlock::new(&mut store, "dense", 3, 3, 4, &mut pr).map_err(core_err)?;
    perturb(&mut store, 0.1, seed + 11);
    let x = rand_t(&[3, 3, 4, 4]);
    let e = layer_grad_check(store, vec![x], coords, seed, &|ctx, v| db.forward(ctx, v[0]))?;
    out.push(("dense_block".to_string(), e));

    let (q, k, v) = (rand_t(&[1, 16, 8]), rand_t(&[1, 16, 8]), rand_t(&[1, 16, 8]));
    let e = layer_grad_check(ParamStore::new(), vec![q, k, v], coords, seed, &|ctx, v| {
        nystrom_attention(ctx, v[0], v[1], v[2], 4, 6)
    })?;
    out.push(("nystrom_attention".to_string(), e));

    let mut store = ParamStore::new();
    let mut pr = rng(seed + 20);
    let gm = glow_module(&mut store, "module", 4, CouplingSide::Second, &mut pr)?;
    let x = rand_t(&[2, 4, 3, 3]);
    gm.actnorm.initialize(&mut store, &x.map(|v| 2.0 * v + 0.5)).map_err(core_err)?;
    perturb(&mut store, 0.1, seed + 21);
    let e = layer_grad_check(store, vec![x], coords, seed, &|ctx, v| {
        let (y, ld) = gm.forward(ctx, v[0])?;
        let ld = ctx.tape.reshape(ld, &[2, 1, 1, 1])?;
        let ld = ctx.tape.mul_scalar(ld, 0.1);
        ctx.tape.add(y, ld)
    })?;
    out.push(("glow_module".to_string(), e));

    out.push(("desk_model_nll".to_string(), model_nll_grad_check(&FlowConfig::desk(), coords, seed)?));
    Ok(out)
}

/// Gradient of the training loss (bits per dimension) of a whole model.
pub fn model_nll_grad_check(cfg: &FlowConfig, coords: usize, seed: u64) -> R<f64> {
    let im = cfg.image;
    let mut model = FlowModel::<f64>::build(cfg).map_err(core_err)?;
    let data = synth_textures(4, im.height, im.width, im.channels, seed).map_err(core_err)?;
    let x = data.batch::<f64>(&[0, 1, 2, 3], None).map_err(core_err)?;
    let keys = [0u64, 1, 2, 3];
    model.initialize(&x, &mut NoiseSource::from_keys(seed, &keys)).map_err(core_err)?;
    perturb(&mut model.store, 0.02, seed);
    let lg = model.loss_and_grads(&x, &mut NoiseSource::from_keys(seed, &keys)).map_err(core_err)?;
    let g = flat_grads(&model.store, &lg.grads);
    let p0 = gather(&model.store);
    let e = compare_sampled(&g, &p0, coords, seed + 1, |p| {
        scatter(&mut model.store, p);
        model.loss_and_grads(&x, &mut NoiseSource::from_keys(seed, &keys)).map_or(f64::NAN, |l| l.loss)
    });
    scatter(&mut model.store, &p0);
    Ok(e)
}

// ---------------------------------------------------------------- bound

fn std_normal_log_prob(z: &[f64]) -> f64 {
    z.iter().map(|v| -0.5 * v * v - 0.5 * LN_2PI).sum()
}

/// Per-draw bounds of the toy `x -> [x, sigma * e + mu]` with an identity flow
/// above and a standard normal prior; the exact marginal is `ln N(x; 0, I)`.
pub fn toy_bounds(x: &[f64], mu: f64, sigma: f64, draws: usize, seed: u64) -> R<Vec<f64>> {
    let d = x.len();
    let mut store = ParamStore::<f64>::new();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let xt = Tensor::from_fn(&[draws, d, 1, 1], |i| x[i % d]);
    let mut noise = NoiseSource::from_keys(seed, &(0..draws as u64).collect::<Vec<_>>());
    let e = noise.normal::<f64>(&[d, 1, 1]);
    let xv = ctx.constant(xt);
    let ev = ctx.constant(e);
    let (m, s) = if mu == 0.0 && sigma == 1.0 {
        (None, None)
    } else {
        (Some(ctx.constant(Tensor::full(&[1, d, 1, 1], mu))), Some(ctx.constant(Tensor::full(&[1, d, 1, 1], sigma))))
    };
    let (z, delta) = augment_with(&mut ctx, xv, ev, m, s).map_err(core_err)?;
    let zd = ctx.value(z).data();
    let dd = ctx.value(delta).data();
    Ok((0..draws).map(|j| std_normal_log_prob(&zd[j * 2 * d..(j + 1) * 2 * d]) + dd[j]).collect())
}

pub struct BoundReport {
    pub exact: f64,
    pub mc_mean: f64,
    pub mc_std_error: f64,
    /// Mean K-sample estimate for K in 1, 10, 100 and the standard error of
    /// each mean.
    pub k_means: [(usize, f64, f64); 3],
}

/// The cross-unit toy with `mu = 0`, `sigma = 1` (single-draw bound
/// statistics) and the K-sample estimator on the `mu`, `sigma` given.
pub fn bound_check(samples: usize, trials: usize, mu: f64, sigma: f64, seed: u64) -> R<BoundReport> {
    let x = [0.7, -1.2, 0.3, 2.0];
    let exact = std_normal_log_prob(&x);
    let b = toy_bounds(&x, 0.0, 1.0, samples, seed)?;
    let n = b.len() as f64;
    let mean = b.iter().sum::<f64>() / n;
    let var = b.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let mut k_means = [(1, 0.0, 0.0), (10, 0.0, 0.0), (100, 0.0, 0.0)];
    for (ki, (k, m, se)) in k_means.iter_mut().enumerate() {
        let all = toy_bounds(&x, mu, sigma, *k * trials, seed + 1 + ki as u64)?;
        let est: Vec<f64> = all.chunks(*k).map(|c| log_mean_exp(c.iter().copied())).collect();
        let (em, es) = denseflow_core::estimator::mean_and_std_error(&est);
        *m = em;
        *se = es;
    }
    Ok(BoundReport { exact, mc_mean: mean, mc_std_error: (var / n).sqrt(), k_means })
}

// ---------------------------------------------------------------- Nyström

/// Relative Frobenius error of Nyström attention against exact attention on
/// random `[1, n, d]` inputs.
pub fn nystrom_error(n: usize, d: usize, m: usize, iterations: usize, seed: u64) -> R<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let mut t = || ctx_free_rand(&[1, n, d], &mut r);
    let (q, k, v) = (t(), t(), t());
    let (q, k, v) = (ctx.constant(q), ctx.constant(k), ctx.constant(v));
    let a = nystrom_attention(&mut ctx, q, k, v, m, iterations).map_err(core_err)?;
    let e = exact_attention(&mut ctx, q, k, v).map_err(core_err)?;
    Ok(rel_err_vec(ctx.value(a).data(), ctx.value(e).data()))
}

fn ctx_free_rand(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| normal(r))
}

/// Nyström error when queries and keys are constant within each of the `m = 4`
/// segments of 16 positions, so that the landmarks lose nothing.
pub fn nystrom_segment_constant_error(iterations: usize, seed: u64) -> R<f64> {
    let (n, d, m) = (16, 8, 4);
    let mut r = rng(seed);
    let seg_q = ctx_free_rand(&[1, m, d], &mut r);
    let seg_k = ctx_free_rand(&[1, m, d], &mut r);
    let expand = |t: &Tensor<f64>| Tensor::from_fn(&[1, n, d], |i| t.data()[(i / d) / (n / m) * d + i % d]);
    let (q, k) = (expand(&seg_q), expand(&seg_k));
    let v = ctx_free_rand(&[1, n, d], &mut r);
    let mut store = ParamStore::<f64>::new();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let (q, k, v) = (ctx.constant(q), ctx.constant(k), ctx.constant(v));
    let a = nystrom_attention(&mut ctx, q, k, v, m, iterations).map_err(core_err)?;
    let e = exact_attention(&mut ctx, q, k, v).map_err(core_err)?;
    Ok(rel_err_vec(ctx.value(a).data(), ctx.value(e).data()))
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- dimensions

/// Dimension account of a preset and whether `input + noise = latent + factored`.
pub fn dimension_account(cfg: &FlowConfig) -> R<(DimensionAccount, bool)> {
    let model = FlowModel::<f32>::build(cfg).map_err(core_err)?;
    let d = model.net.dims;
    Ok((d, d.input + d.noise == d.latent + d.factored))
}

/// Dimension account measured from the tensors of an actual encode pass.
pub fn measured_account(cfg: &FlowConfig) -> R<DimensionAccount> {
    let mut model = FlowModel::<f32>::build(cfg).map_err(core_err)?;
    let im = cfg.image;
    let data = synth_textures(2, im.height, im.width, im.channels, 1).map_err(core_err)?;
    let x = data.batch::<f32>(&[0, 1], None).map_err(core_err)?;
    let enc = model.encode(&x, &mut NoiseSource::from_keys(0, &[0, 1])).map_err(core_err)?;
    let per = |t: &Tensor<f32>| t.numel() / 2;
    Ok(DimensionAccount {
        input: im.dims(),
        noise: enc.noises.iter().map(per).sum(),
        latent: per(&enc.z),
        factored: enc.dropped.iter().map(per).sum(),
    })
}

// ---------------------------------------------------------------- formats

/// DFIM write, read, write; true when both byte strings are identical.
pub fn dfim_round_trip(d: &ImageDataset) -> R<bool> {
    let a = encode_dataset(d).map_err(|e| e.to_string())?;
    let back = decode_dataset(&a, Split::Unspecified).map_err(|e| e.to_string())?;
    let b = encode_dataset(&back).map_err(|e| e.to_string())?;
    Ok(a == b && back.pixels() == d.pixels())
}

/// DFCK write, read, write of a trainer state after `steps` desk steps.
pub fn dfck_round_trip(steps: u64, seed: u64) -> R<bool> {
    let data = synth_textures(64, 8, 8, 3, seed).map_err(core_err)?;
    let model = FlowModel::<f32>::build(&FlowConfig::desk()).map_err(core_err)?;
    let mut tr = Trainer::new(model, TrainConfig { batch_size: 16, ..TrainConfig::desk() }).map_err(core_err)?;
    for _ in 0..steps {
        tr.step(&data).map_err(core_err)?;
    }
    let ck = tr.to_checkpoint("checkpoint_every = 0\n".to_string());
    let a = encode_checkpoint(&ck).map_err(|e| e.to_string())?;
    let back = decode_checkpoint(&a).map_err(|e| e.to_string())?;
    let b = encode_checkpoint(&back).map_err(|e| e.to_string())?;
    Ok(a == b && back == ck)
}

// ---------------------------------------------------------------- suite

/// Pass thresholds shared by the suite and the acceptance tests.
pub const JACOBIAN_REL_TOL: f64 = 1e-3;
pub const GRADIENT_REL_TOL: f64 = 1e-3;
pub const NYSTROM_FULL_TOL: f64 = 1e-4;
pub const NYSTROM_QUARTER_TOL: f64 = 0.15;
pub const NYSTROM_SEGMENT_TOL: f64 = 1e-3;
/// Enough Newton-Schulz iterations for the pseudo-inverse of a 16x16
/// softmax matrix to converge.
pub const NYSTROM_CONVERGED_ITERATIONS: usize = 20;
/// Newton-Schulz iterations used by the Nyström checks.
pub const NYSTROM_ITERATIONS: usize = 6;

fn round_trip_checks<T: Real + 'static>(size: &SuiteSize, seed: u64, out: &mut Vec<Check>) {
    let tol = inverse_tolerance::<T>();
    out.push(run(&format!("invertibility/bijections/{}", dtype_name::<T>()), || {
        let errs = bijection_round_trips::<T>(size.inverse_inputs, seed)?;
        let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
        let list: Vec<String> = errs.iter().map(|(n, e)| format!("{} {:.1e}", n, e)).collect();
        Ok((worst <= tol, format!("{} inputs, max |x - inv(fwd(x))| <= {:.0e}: {}", size.inverse_inputs, tol, list.join(", "))))
    }));
    let mut presets = vec![FlowConfig::desk()];
    for noise in [NoiseMode::None, NoiseMode::White] {
        presets.push(FlowConfig::desk().ablation(noise, CouplingKind::Glow));
    }
    for cfg in presets {
        out.push(run(&format!("invertibility/{}/{}", cfg.name, dtype_name::<T>()), || {
            let e = model_round_trip::<T>(&cfg, size.inverse_inputs, 0.02, seed)?;
            Ok((e <= tol, format!("{} inputs, max error {:.2e} (tolerance {:.0e})", size.inverse_inputs, e, tol)))
        }));
    }
}

/// Runs every check, reporting each through `report` as it finishes.
pub fn run_suite(size: &SuiteSize, seed: u64, mut report: impl FnMut(&Check)) -> Vec<Check> {
    let mut all = Vec::new();
    let mut emit = |c: Check, all: &mut Vec<Check>| {
        report(&c);
        all.push(c);
    };

    let mut rt = Vec::new();
    round_trip_checks::<f32>(size, seed, &mut rt);
    round_trip_checks::<f64>(size, seed, &mut rt);
    for c in rt {
        emit(c, &mut all);
    }
    if size.paper_presets {
        for cfg in [FlowConfig::denseflow_45_6(), FlowConfig::denseflow_74_10()] {
            let c = run(&format!("invertibility/{}/f32", cfg.name), || {
                let e = model_round_trip::<f32>(&cfg, 1, 0.002, seed)?;
                let tol = inverse_tolerance::<f32>();
                Ok((e <= tol, format!("1 input, max error {:.2e} (tolerance {:.0e})", e, tol)))
            });
            emit(c, &mut all);
        }
    }

    match jacobian_checks(seed) {
        Ok(list) => {
            for (name, a, n) in list {
                let e = rel_err(a, n, 1e-12);
                let c = Check {
                    name: format!("jacobian/{}", name),
                    passed: e < JACOBIAN_REL_TOL,
                    informational: false,
                    detail: format!("analytic {:.8} numeric {:.8} relative error {:.2e}", a, n, e),
                    seconds: 0.0,
                };
                emit(c, &mut all);
            }
        }
        Err(e) => emit(Check { name: "jacobian".into(), passed: false, informational: false, detail: e, seconds: 0.0 }, &mut all),
    }

    let t = Instant::now();
    match gradient_checks(size.grad_coords, seed) {
        Ok(list) => {
            let secs = t.elapsed().as_secs_f64() / list.len() as f64;
            for (name, e) in list {
                let c = Check {
                    name: format!("gradient/{}", name),
                    passed: e < GRADIENT_REL_TOL,
                    informational: false,
                    detail: format!("{} sampled coordinates, worst relative error {:.2e}", size.grad_coords, e),
                    seconds: secs,
                };
                emit(c, &mut all);
            }
        }
        Err(e) => emit(Check { name: "gradient".into(), passed: false, informational: false, detail: e, seconds: 0.0 }, &mut all),
    }

    let c = run("bound/cross_unit_toy", || {
        let r = bound_check(size.bound_samples, size.bound_trials, 0.3, 1.5, seed)?;
        let within = (r.mc_mean - r.exact).abs() <= 3.0 * r.mc_std_error + 1e-9;
        let [(_, m1, s1), (_, m10, s10), (_, m100, s100)] = r.k_means;
        let mono = m10 - m1 >= -3.0 * (s1 * s1 + s10 * s10).sqrt() && m100 - m10 >= -3.0 * (s10 * s10 + s100 * s100).sqrt();
        Ok((
            within && mono,
            format!(
                "exact {:.6}, mean of {} draws {:.6} (se {:.1e}); K=1/10/100 means {:.4}/{:.4}/{:.4}",
                r.exact, size.bound_samples, r.mc_mean, r.mc_std_error, m1, m10, m100
            ),
        ))
    });
    emit(c, &mut all);

    let c = run("nystrom/landmarks_equal_positions", || {
        let e = nystrom_error(16, 8, 16, NYSTROM_CONVERGED_ITERATIONS, seed)?;
        let e6 = nystrom_error(16, 8, 16, NYSTROM_ITERATIONS, seed)?;
        Ok((
            e < NYSTROM_FULL_TOL,
            format!(
                "relative error {:.2e} with {} Newton-Schulz iterations ({:.2e} with {})",
                e, NYSTROM_CONVERGED_ITERATIONS, e6, NYSTROM_ITERATIONS
            ),
        ))
    });
    emit(c, &mut all);
    let c = run("nystrom/segment_constant_inputs", || {
        let e = nystrom_segment_constant_error(NYSTROM_CONVERGED_ITERATIONS, seed)?;
        let e6 = nystrom_segment_constant_error(NYSTROM_ITERATIONS, seed)?;
        Ok((
            e < NYSTROM_SEGMENT_TOL,
            format!(
                "m = 4 of 16, relative error {:.2e} with {} Newton-Schulz iterations ({:.2e} with {})",
                e, NYSTROM_CONVERGED_ITERATIONS, e6, NYSTROM_ITERATIONS
            ),
        ))
    });
    emit(c, &mut all);
    let mut c = run("nystrom/quarter_landmarks", || {
        let mut errs = (0..size.nystrom_trials)
            .map(|t| nystrom_error(16, 8, 4, NYSTROM_ITERATIONS, seed + t as u64))
            .collect::<R<Vec<f64>>>()?;
        let m = median(&mut errs);
        Ok((
            m < NYSTROM_QUARTER_TOL,
            format!("standard normal q, k, v: median relative error {:.3} over {} trials (target {})", m, size.nystrom_trials, NYSTROM_QUARTER_TOL),
        ))
    });
    // a property of the approximation on unstructured inputs, not of the code
    c.informational = true;
    emit(c, &mut all);

    let mut cfgs = vec![FlowConfig::desk()];
    for noise in [NoiseMode::None, NoiseMode::White, NoiseMode::Preconditioned] {
        for kind in [CouplingKind::Glow, CouplingKind::Dense, CouplingKind::Fusion] {
            cfgs.push(FlowConfig::desk().ablation(noise, kind));
        }
    }
    for cfg in cfgs {
        let c = run(&format!("dimensions/{}", cfg.name), || {
            let (d, ok) = dimension_account(&cfg)?;
            let m = measured_account(&cfg)?;
            Ok((ok && m == d, format!("{} + {} = {} + {}", d.input, d.noise, d.latent, d.factored)))
        });
        emit(c, &mut all);
    }
    if size.paper_presets {
        for cfg in [FlowConfig::denseflow_45_6(), FlowConfig::denseflow_74_10()] {
            let c = run(&format!("dimensions/{}", cfg.name), || {
                let (d, ok) = dimension_account(&cfg)?;
                Ok((ok, format!("{} + {} = {} + {}", d.input, d.noise, d.latent, d.factored)))
            });
            emit(c, &mut all);
        }
    }

    let c = run("format/dfim_round_trip", || {
        let d = synth_textures(100, 8, 8, 3, seed).map_err(core_err)?;
        Ok((dfim_round_trip(&d)?, "100 images, write-read-write byte-identical".into()))
    });
    emit(c, &mut all);
    let c = run("format/dfck_round_trip", || Ok((dfck_round_trip(2, seed)?, "trainer state after 2 steps, write-read-write byte-identical".into())));
    emit(c, &mut all);
    all
}
