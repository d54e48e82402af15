use denseflow_core::bijections::{
    split_sizes, squeeze, unsqueeze, ActNorm, AffineCoupling, CouplingSide, DequantMode, Dequantizer, FactorOut,
    InvConv1x1, Latent,
};
use denseflow_core::check::{log_abs_det, numeric_jacobian, rel_err};
use denseflow_core::coupling_net::{CouplingKind, CouplingNetConfig};
use denseflow_core::error::Error;
use denseflow_core::noise::NoiseSource;
use denseflow_core::params::{Ctx, Mode, ParamStore};
use denseflow_core::tensor::{Tensor, Var};
use denseflow_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

fn perturb(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut r = rng(seed);
    for id in store.trainable_ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += std * r.sample::<f64, _>(StandardNormal);
        }
    }
}

fn cfg(kind: CouplingKind) -> CouplingNetConfig {
    CouplingNetConfig { kind, glow_hidden: 8, ..CouplingNetConfig::desk() }
}

type Fwd<'a> = &'a dyn Fn(&mut Ctx<f64>, Var) -> Result<(Var, Var)>;
type Inv<'a> = &'a dyn Fn(&mut Ctx<f64>, Var) -> Result<Var>;

fn round_trip(store: &mut ParamStore<f64>, x: &Tensor<f64>, fwd: Fwd, inv: Inv) -> f64 {
    let mut ctx = Ctx::new(store, Mode::Eval);
    let xv = ctx.constant(x.clone());
    let (y, _) = fwd(&mut ctx, xv).unwrap();
    let xr = inv(&mut ctx, y).unwrap();
    ctx.value(xr).max_abs_diff(x)
}

/// (analytic, numeric) log-determinant for a single example.
fn logdets(store: &mut ParamStore<f64>, x: &Tensor<f64>, fwd: Fwd) -> (f64, f64) {
    let shape = x.shape().to_vec();
    let mut run = |xs: &[f64]| {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let xv = ctx.constant(Tensor::new(&shape, xs.to_vec()).unwrap());
        let (y, ld) = fwd(&mut ctx, xv).unwrap();
        (ctx.value(y).data().to_vec(), ctx.value(ld).data()[0])
    };
    let analytic = run(x.data()).1;
    let jac = numeric_jacobian(x.data(), 1e-6, |xs| run(xs).0);
    (analytic, log_abs_det(&jac))
}

#[test]
fn actnorm_initialization_standardizes_each_channel() {
    let mut store = ParamStore::new();
    let an = ActNorm::new(&mut store, "an", 3).unwrap();
    let x = randn(&[16, 3, 4, 4], 1).map(|v| 5.0 * v + 2.0);
    let x = Tensor::from_fn(x.shape(), |i| x.data()[i] * (1.0 + (i / 16 % 3) as f64));
    an.initialize(&mut store, &x).unwrap();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let xv = ctx.constant(x.clone());
    let (y, _) = an.forward(&mut ctx, xv).unwrap();
    let y = ctx.value(y);
    for ch in 0..3 {
        let vals: Vec<f64> = (0..16).flat_map(|b| y.data()[(b * 3 + ch) * 16..(b * 3 + ch + 1) * 16].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-9, "channel {} mean {}", ch, mean);
        assert!((var - 1.0).abs() < 1e-5, "channel {} var {}", ch, var);
    }
}

#[test]
fn actnorm_initializes_on_first_training_pass_only() {
    let mut store = ParamStore::<f64>::new();
    let an = ActNorm::new(&mut store, "an", 2).unwrap();
    let x = randn(&[4, 2, 3, 3], 2).map(|v| 3.0 * v + 1.0);
    {
        let mut ctx = Ctx::new(&mut store, Mode::Eval);
        let xv = ctx.constant(x.clone());
        an.forward(&mut ctx, xv).unwrap();
    }
    assert!(!an.is_initialized(&store));
    {
        let mut ctx = Ctx::new(&mut store, Mode::Train);
        let xv = ctx.constant(x.clone());
        an.forward(&mut ctx, xv).unwrap();
    }
    assert!(an.is_initialized(&store));
    let s = store.get(an.scale_id()).clone();
    let mut ctx = Ctx::new(&mut store, Mode::Train);
    let xv = ctx.constant(x.map(|v| 10.0 * v));
    an.forward(&mut ctx, xv).unwrap();
    assert_eq!(ctx.store().get(an.scale_id()), &s);
}

#[test]
fn actnorm_rejects_a_vanishing_scale() {
    let mut store = ParamStore::<f64>::new();
    let an = ActNorm::new(&mut store, "an", 2).unwrap();
    store.set(an.scale_id(), Tensor::new(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap()).unwrap();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let xv = ctx.constant(Tensor::ones(&[1, 2, 2, 2]));
    assert!(matches!(an.forward(&mut ctx, xv), Err(Error::SingularScale { .. })));
}

#[test]
fn invconv_starts_orthogonal_and_logdet_matches_determinant() {
    let mut store = ParamStore::<f64>::new();
    let ic = InvConv1x1::new(&mut store, "ic", 5, &mut rng(3)).unwrap();
    let w = ic.weight_matrix(&store);
    let wtw = w.transpose() * &w;
    for i in 0..5 {
        for j in 0..5 {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((wtw[(i, j)] - e).abs() < 1e-12);
        }
    }
    perturb(&mut store, 0.3, 4);
    let w = ic.weight_matrix(&store);
    let x = randn(&[2, 5, 3, 3], 5);
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let xv = ctx.constant(x);
    let (_, ld) = ic.forward(&mut ctx, xv).unwrap();
    let expect = 9.0 * w.determinant().abs().ln();
    for &v in ctx.value(ld).data() {
        assert!(rel_err(v, expect, 1e-12) < 1e-10);
    }
    let inv = ic.inverse_matrix(ctx.store());
    let id = &w * inv;
    assert!((id - nalgebra::DMatrix::<f64>::identity(5, 5)).amax() < 1e-12);
}

#[test]
fn coupling_at_zero_init_scales_by_sigmoid_two_and_shifts_by_zero() {
    for kind in [CouplingKind::Glow, CouplingKind::Dense, CouplingKind::Fusion] {
        let mut store = ParamStore::<f64>::new();
        let cp = AffineCoupling::new(&mut store, "cp", 4, CouplingSide::Second, &cfg(kind), (4, 4), &mut rng(6)).unwrap();
        let x = randn(&[2, 4, 4, 4], 7);
        let mut ctx = Ctx::new(&mut store, Mode::Eval);
        let xv = ctx.constant(x.clone());
        let (y, ld) = cp.forward(&mut ctx, xv).unwrap();
        let s = 1.0 / (1.0 + (-2.0f64).exp());
        let y = ctx.value(y);
        for b in 0..2 {
            for c in 0..4 {
                for p in 0..16 {
                    let i = (b * 4 + c) * 16 + p;
                    let want = if c < 2 { x.data()[i] } else { s * x.data()[i] };
                    assert!((y.data()[i] - want).abs() < 1e-14, "{:?}", kind);
                }
            }
        }
        let expect = 32.0 * s.ln();
        for &v in ctx.value(ld).data() {
            assert!((v - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn split_sizes_put_the_extra_channel_first() {
    assert_eq!(split_sizes(4), (2, 2));
    assert_eq!(split_sizes(5), (3, 2));
    assert_eq!(split_sizes(1), (1, 0));
}

#[test]
fn squeeze_is_volume_preserving_and_reshapes() {
    let mut store = ParamStore::<f64>::new();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let x = ctx.constant(randn(&[2, 3, 4, 6], 8));
    let (y, ld) = squeeze(&mut ctx, x).unwrap();
    assert_eq!(ctx.shape(y), &[2, 12, 2, 3]);
    assert!(ctx.value(ld).data().iter().all(|&v| v == 0.0));
    let odd = ctx.constant(Tensor::zeros(&[1, 1, 3, 4]));
    assert!(squeeze(&mut ctx, odd).is_err());
}

#[test]
fn factor_out_unconditional_prior_is_standard_normal() {
    let mut store = ParamStore::<f64>::new();
    let fo = FactorOut::new(&mut store, "fo", 4, false, &mut rng(9)).unwrap();
    let x = randn(&[1, 4, 2, 2], 10);
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let xv = ctx.constant(x.clone());
    let (zr, zd, lp) = fo.forward(&mut ctx, xv).unwrap();
    assert_eq!(ctx.shape(zr), &[1, 2, 2, 2]);
    assert_eq!(ctx.value(zd).data(), &x.data()[8..]);
    let expect: f64 = x.data()[8..].iter().map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum();
    assert!((ctx.value(lp).data()[0] - expect).abs() < 1e-12);
    assert!(FactorOut::new(&mut ParamStore::<f64>::new(), "odd", 3, true, &mut rng(0)).is_err());
}

#[test]
fn dequantization_rounds_back_to_the_pixels() {
    for mode in [DequantMode::Uniform, DequantMode::Variational] {
        let mut store = ParamStore::<f64>::new();
        let dq = Dequantizer::new(&mut store, "dq", mode, 3, &mut rng(11)).unwrap();
        perturb(&mut store, 0.2, 12);
        let mut r = rng(13);
        let px = Tensor::from_fn(&[4, 3, 4, 4], |_| r.random_range(0..256) as f64);
        let mut ctx = Ctx::new(&mut store, Mode::Eval);
        let xv = ctx.constant(px.clone());
        let mut noise = NoiseSource::from_keys(0, &[0, 1, 2, 3]);
        let (xc, _, _) = dq.forward(&mut ctx, xv, &mut noise).unwrap();
        assert_eq!(Dequantizer::quantize(ctx.value(xc)), px);
        let bad = ctx.constant(Tensor::full(&[1, 3, 1, 1], 256.0));
        assert!(dq.forward(&mut ctx, bad, &mut NoiseSource::from_keys(0, &[0])).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bijections_invert_in_f64(seed in 0u64..10_000, c in 2usize..6, hw in 1usize..4) {
        let h = 2 * hw;
        let x = randn(&[2, c, h, h], seed);

        let mut store = ParamStore::new();
        let an = ActNorm::new(&mut store, "an", c).unwrap();
        an.initialize(&mut store, &x.map(|v| 2.0 * v - 1.0)).unwrap();
        let e = round_trip(&mut store, &x, &|ctx, v| an.forward(ctx, v), &|ctx, v| an.inverse(ctx, v));
        prop_assert!(e < 1e-10, "actnorm {}", e);

        let mut store = ParamStore::new();
        let ic = InvConv1x1::new(&mut store, "ic", c, &mut rng(seed)).unwrap();
        perturb(&mut store, 0.2, seed);
        let e = round_trip(&mut store, &x, &|ctx, v| ic.forward(ctx, v), &|ctx, v| ic.inverse(ctx, v));
        prop_assert!(e < 1e-10, "invconv {}", e);

        for (kind, side) in [(CouplingKind::Glow, CouplingSide::First), (CouplingKind::Fusion, CouplingSide::Second)] {
            let mut store = ParamStore::new();
            let cp = AffineCoupling::new(&mut store, "cp", c, side, &cfg(kind), (h, h), &mut rng(seed)).unwrap();
            perturb(&mut store, 0.1, seed + 1);
            let e = round_trip(&mut store, &x, &|ctx, v| cp.forward(ctx, v), &|ctx, v| cp.inverse(ctx, v));
            prop_assert!(e < 1e-10, "coupling {:?} {}", kind, e);
        }

        let mut store = ParamStore::new();
        let e = round_trip(&mut store, &x, &|ctx, v| squeeze(ctx, v), &|ctx, v| unsqueeze(ctx, v));
        prop_assert_eq!(e, 0.0);

        if c % 2 == 0 {
            let mut store = ParamStore::new();
            let fo = FactorOut::new(&mut store, "fo", c, true, &mut rng(seed)).unwrap();
            perturb(&mut store, 0.2, seed + 2);
            let mut ctx = Ctx::new(&mut store, Mode::Eval);
            let xv = ctx.constant(x.clone());
            let (zr, zd, _) = fo.forward(&mut ctx, xv).unwrap();
            let back = fo.inverse(&mut ctx, zr, Latent::Given(zd)).unwrap();
            prop_assert_eq!(ctx.value(back), &x);
        }
    }

    #[test]
    fn analytic_logdets_match_numeric_jacobians(seed in 0u64..10_000) {
        let x = randn(&[1, 3, 4, 4], seed);
        let mut store = ParamStore::new();
        let an = ActNorm::new(&mut store, "an", 3).unwrap();
        an.initialize(&mut store, &randn(&[4, 3, 4, 4], seed + 1).map(|v| 1.5 * v + 0.3)).unwrap();
        perturb(&mut store, 0.2, seed);
        let (a, n) = logdets(&mut store, &x, &|ctx, v| an.forward(ctx, v));
        prop_assert!(rel_err(a, n, 1e-9) < 1e-6, "actnorm {} {}", a, n);

        let mut store = ParamStore::new();
        let ic = InvConv1x1::new(&mut store, "ic", 3, &mut rng(seed)).unwrap();
        perturb(&mut store, 0.2, seed);
        let (a, n) = logdets(&mut store, &x, &|ctx, v| ic.forward(ctx, v));
        prop_assert!(rel_err(a, n, 1e-9) < 1e-6, "invconv {} {}", a, n);

        let x = randn(&[1, 4, 3, 3], seed + 2);
        let mut store = ParamStore::new();
        let cp = AffineCoupling::new(&mut store, "cp", 4, CouplingSide::First, &cfg(CouplingKind::Glow), (3, 3), &mut rng(seed)).unwrap();
        perturb(&mut store, 0.1, seed);
        let (a, n) = logdets(&mut store, &x, &|ctx, v| cp.forward(ctx, v));
        prop_assert!(rel_err(a, n, 1e-9) < 1e-6, "coupling {} {}", a, n);
    }
}
