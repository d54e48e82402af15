use denseflow_core::cross_unit::{augment_with, strip, CrossUnit, SIGMA_FLOOR};
use denseflow_core::noise::NoiseSource;
use denseflow_core::params::{Ctx, Mode, ParamStore};
use denseflow_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.8378770664093453;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(0.05..3.0))
}

fn delta_oracle(e: &[f64], sigma: &[f64], per: usize) -> Vec<f64> {
    e.chunks(per)
        .zip(sigma.chunks(per))
        .map(|(e, s)| {
            let mut acc = 0.0;
            for i in 0..per {
                acc += 0.5 * e[i] * e[i] + 0.5 * LN_2PI + s[i].ln();
            }
            acc
        })
        .collect()
}

#[test]
fn white_noise_delta_is_the_negative_standard_log_density() {
    let mut store = ParamStore::<f64>::new();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let z = ctx.constant(randn(&[2, 3, 2, 2], 0));
    let e = randn(&[2, 4, 2, 2], 1);
    let ev = ctx.constant(e.clone());
    let (z_aug, delta) = augment_with(&mut ctx, z, ev, None, None).unwrap();
    assert_eq!(ctx.shape(z_aug), &[2, 7, 2, 2]);
    let want = delta_oracle(e.data(), &[1.0; 32], 16);
    let got = ctx.value(delta).data();
    for i in 0..2 {
        assert!((got[i] - want[i]).abs() < 1e-12, "{} vs {}", got[i], want[i]);
    }
}

#[test]
fn fresh_conditioner_gives_zero_mean_and_softplus_zero_scale() {
    let mut store = ParamStore::<f64>::new();
    let cu = CrossUnit::new(&mut store, "cu", 3, 5, 8, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(cu.is_preconditioned());
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let c = ctx.constant(randn(&[2, 5, 4, 4], 2));
    let (mu, sigma) = cu.conditioner(&mut ctx, c).unwrap().unwrap();
    assert_eq!(ctx.shape(mu), &[2, 3, 4, 4]);
    assert!(ctx.value(mu).data().iter().all(|&v| v == 0.0));
    let want = std::f64::consts::LN_2 + SIGMA_FLOOR;
    assert!(ctx.value(sigma).data().iter().all(|&v| (v - want).abs() < 1e-15));
}

#[test]
fn scale_never_drops_below_the_floor() {
    let mut store = ParamStore::<f64>::new();
    let cu = CrossUnit::new(&mut store, "cu", 2, 3, 4, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let bias = store.id("cu.cond.out.bias").unwrap();
    store.set(bias, Tensor::full(&[1, 4, 1, 1], -1e4)).unwrap();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let c = ctx.constant(randn(&[1, 3, 3, 3], 3));
    let (_, sigma) = cu.conditioner(&mut ctx, c).unwrap().unwrap();
    for &s in ctx.value(sigma).data() {
        assert!((SIGMA_FLOOR..2.0 * SIGMA_FLOOR).contains(&s), "{}", s);
    }
}

#[test]
fn augmentation_appends_k_channels_and_counts_one_conditioner_call() {
    let mut store = ParamStore::<f64>::new();
    let cu = CrossUnit::new(&mut store, "cu", 4, 6, 8, true, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let z = ctx.constant(randn(&[3, 2, 4, 4], 5));
    let c = ctx.constant(randn(&[3, 4, 4, 4], 6));
    let mut noise = NoiseSource::from_keys(7, &[0, 1, 2]);
    let aug = cu.augment(&mut ctx, z, &[z, c], &mut noise).unwrap();
    assert_eq!(ctx.shape(aug.z_aug), &[3, 6, 4, 4]);
    assert_eq!(ctx.shape(aug.delta), &[3]);
    assert_eq!(ctx.conditioner_calls(), 1);
    let back = strip(&mut ctx, aug.z_aug, 4).unwrap();
    assert_eq!(ctx.value(back), ctx.value(z));
}

#[test]
fn white_cross_unit_has_no_parameters() {
    let mut store = ParamStore::<f64>::new();
    let cu = CrossUnit::new(&mut store, "cu", 4, 6, 8, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(!cu.is_preconditioned());
    assert_eq!(cu.param_count(), 0);
    assert!(store.is_empty());
}

#[test]
fn mismatched_context_is_rejected() {
    let mut store = ParamStore::<f64>::new();
    let cu = CrossUnit::new(&mut store, "cu", 2, 3, 4, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let z = ctx.constant(randn(&[1, 3, 4, 4], 0));
    let c = ctx.constant(randn(&[1, 3, 2, 2], 1));
    let mut noise = NoiseSource::from_keys(0, &[0]);
    assert!(cu.augment(&mut ctx, z, &[c], &mut noise).is_err());
    assert!(strip(&mut ctx, z, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delta_matches_the_closed_form(seed in 0u64..100_000, b in 1usize..4, k in 1usize..5, hw in 1usize..4) {
        let mut store = ParamStore::<f64>::new();
        let mut ctx = Ctx::new(&mut store, Mode::Eval);
        let e = randn(&[b, k, hw, hw], seed);
        let mu = randn(&[b, k, hw, hw], seed + 1);
        let sigma = positive(&[b, k, hw, hw], seed + 2);
        let z = ctx.constant(randn(&[b, 2, hw, hw], seed + 3));
        let ev = ctx.constant(e.clone());
        let mv = ctx.constant(mu.clone());
        let sv = ctx.constant(sigma.clone());
        let (z_aug, delta) = augment_with(&mut ctx, z, ev, Some(mv), Some(sv)).unwrap();
        let want = delta_oracle(e.data(), sigma.data(), k * hw * hw);
        for (g, w) in ctx.value(delta).data().iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-10 * (1.0 + w.abs()));
        }
        let per = k * hw * hw;
        let zc = 2 * hw * hw;
        let out = ctx.value(z_aug).data();
        for i in 0..b {
            for j in 0..per {
                let want = sigma.data()[i * per + j] * e.data()[i * per + j] + mu.data()[i * per + j];
                prop_assert!((out[i * (zc + per) + zc + j] - want).abs() < 1e-12);
            }
        }
    }
}
