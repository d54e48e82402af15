use denseflow_core::check::rel_err_vec;
use denseflow_core::coupling_net::{
    exact_attention, landmark_matrix, nystrom_attention, nystrom_factors, CouplingKind, CouplingNet,
    CouplingNetConfig, DenseBlock, NystromAttention,
};
use denseflow_core::error::Error;
use denseflow_core::params::{Ctx, Mode, ParamStore};
use denseflow_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dense_out(n: usize, g: usize, c: usize) -> (usize, Vec<usize>, Vec<usize>) {
    let mut store = ParamStore::<f64>::new();
    let db = DenseBlock::new(&mut store, "db", c, n, g, &mut rng(0)).unwrap();
    let inputs = db.convs().map(|conv| store.get(conv.weight()).shape()[1]).collect();
    let mut ctx = Ctx::new(&mut store, Mode::Train);
    let x = ctx.constant(randn(&[2, c, 3, 3], 1));
    let y = db.forward(&mut ctx, x).unwrap();
    let shape = ctx.shape(y).to_vec();
    (db.out_channels(), shape, inputs)
}

#[test]
fn dense_block_channel_arithmetic() {
    assert_eq!(dense_out(1, 2, 3).0, 5);
    let (out, shape, inputs) = dense_out(3, 4, 8);
    assert_eq!(out, 20);
    assert_eq!(shape, vec![2, 20, 3, 3]);
    assert_eq!(inputs, vec![8, 12, 16]);
}

#[test]
fn dense_block_passes_its_input_through_unchanged() {
    let mut store = ParamStore::<f64>::new();
    let db = DenseBlock::new(&mut store, "db", 3, 2, 4, &mut rng(2)).unwrap();
    let x = randn(&[2, 3, 4, 4], 3);
    let mut ctx = Ctx::new(&mut store, Mode::Train);
    let xv = ctx.constant(x.clone());
    let y = db.forward(&mut ctx, xv).unwrap();
    let y = ctx.value(y);
    for b in 0..2 {
        assert_eq!(&y.data()[b * 11 * 16..b * 11 * 16 + 48], &x.data()[b * 48..(b + 1) * 48]);
    }
}

#[test]
fn paper_coupling_channel_arithmetic() {
    let g = 67;
    let cfg = CouplingNetConfig {
        kind: CouplingKind::Fusion,
        proj_channels: 48,
        dense_layers: 7,
        dense_growth: g,
        attn_heads: 1,
        attn_landmarks: 64,
        pinv_iterations: 6,
        glow_hidden: 512,
    };
    assert_eq!(cfg.blend_channels(), 96 + 7 * g);
    assert_eq!(CouplingNetConfig { kind: CouplingKind::Dense, ..cfg.clone() }.blend_channels(), 48 + 7 * g);
}

#[test]
fn fresh_coupling_networks_output_zeros() {
    for kind in [CouplingKind::Glow, CouplingKind::Dense, CouplingKind::Fusion] {
        let mut store = ParamStore::<f64>::new();
        let cfg = CouplingNetConfig { kind, ..CouplingNetConfig::desk() };
        let net = CouplingNet::new(&mut store, "net", 3, 6, &cfg, (4, 4), &mut rng(4)).unwrap();
        let mut ctx = Ctx::new(&mut store, Mode::Train);
        let x = ctx.constant(randn(&[2, 3, 4, 4], 5));
        let y = net.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.shape(y), &[2, 6, 4, 4]);
        assert!(ctx.value(y).data().iter().all(|&v| v == 0.0), "{:?}", kind);
    }
}

#[test]
fn more_landmarks_than_positions_is_a_config_error() {
    assert!(matches!(landmark_matrix::<f64>(4, 5), Err(Error::Config(_))));
    assert!(matches!(landmark_matrix::<f64>(4, 0), Err(Error::Config(_))));
    let mut store = ParamStore::<f64>::new();
    assert!(NystromAttention::new(&mut store, "a", 4, (2, 2), 5, 6, &mut rng(0)).is_err());
}

#[test]
fn landmark_matrix_averages_contiguous_segments() {
    let m = landmark_matrix::<f64>(5, 2).unwrap();
    assert_eq!(m.shape(), &[2, 5]);
    let third = 1.0 / 3.0;
    assert_eq!(m.data(), &[third, third, third, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
}

#[test]
fn zero_values_give_zero_output() {
    let mut store = ParamStore::<f64>::new();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let q = ctx.constant(randn(&[2, 16, 8], 6));
    let k = ctx.constant(randn(&[2, 16, 8], 7));
    let v = ctx.constant(Tensor::zeros(&[2, 16, 8]));
    let y = nystrom_attention(&mut ctx, q, k, v, 4, 6).unwrap();
    assert!(ctx.value(y).data().iter().all(|&x| x == 0.0));
}

#[test]
fn full_landmarks_reproduce_exact_attention() {
    for seed in 0..100 {
        let mut store = ParamStore::<f64>::new();
        let mut ctx = Ctx::new(&mut store, Mode::Eval);
        let q = ctx.constant(randn(&[1, 16, 8], 3 * seed));
        let k = ctx.constant(randn(&[1, 16, 8], 3 * seed + 1));
        let v = ctx.constant(randn(&[1, 16, 8], 3 * seed + 2));
        let a = nystrom_attention(&mut ctx, q, k, v, 16, 20).unwrap();
        let e = exact_attention(&mut ctx, q, k, v).unwrap();
        let err = rel_err_vec(ctx.value(a).data(), ctx.value(e).data());
        assert!(err < 1e-4, "seed {} error {}", seed, err);
    }
}

#[test]
fn segment_constant_inputs_lose_nothing_to_the_landmarks() {
    let (n, d, m) = (16, 8, 4);
    for seed in 0..20 {
        let sq = randn(&[m, d], 2 * seed);
        let sk = randn(&[m, d], 2 * seed + 1);
        let expand = |t: &Tensor<f64>| Tensor::from_fn(&[1, n, d], |i| t.data()[(i / d) / (n / m) * d + i % d]);
        let mut store = ParamStore::<f64>::new();
        let mut ctx = Ctx::new(&mut store, Mode::Eval);
        let q = ctx.constant(expand(&sq));
        let k = ctx.constant(expand(&sk));
        let v = ctx.constant(randn(&[1, n, d], 99 + seed));
        let a = nystrom_attention(&mut ctx, q, k, v, m, 20).unwrap();
        let e = exact_attention(&mut ctx, q, k, v).unwrap();
        let err = rel_err_vec(ctx.value(a).data(), ctx.value(e).data());
        assert!(err < 1e-3, "seed {} error {}", seed, err);
    }
}

#[test]
fn attention_module_keeps_the_feature_map_shape() {
    let mut store = ParamStore::<f64>::new();
    let at = NystromAttention::new(&mut store, "a", 4, (4, 2), 4, 6, &mut rng(8)).unwrap();
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let x = ctx.constant(randn(&[3, 4, 4, 2], 9));
    let y = at.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.shape(y), &[3, 4, 4, 2]);
    let wrong = ctx.constant(randn(&[1, 4, 2, 4], 9));
    assert!(at.forward(&mut ctx, wrong).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dense_block_recurrence(n in 1usize..5, g in 1usize..6, c in 1usize..9) {
        let (out, shape, inputs) = dense_out(n, g, c);
        prop_assert_eq!(out, c + n * g);
        prop_assert_eq!(shape[1], c + n * g);
        let want: Vec<usize> = (0..n).map(|k| c + k * g).collect();
        prop_assert_eq!(inputs, want);
    }

    #[test]
    fn nystrom_factors_are_row_stochastic(seed in 0u64..10_000, n in 2usize..20, scale in 0.1f64..5.0) {
        let m = 1 + (seed as usize % n);
        let mut store = ParamStore::<f64>::new();
        let mut ctx = Ctx::new(&mut store, Mode::Eval);
        let q = ctx.constant(randn(&[2, n, 4], seed).map(|v| scale * v));
        let k = ctx.constant(randn(&[2, n, 4], seed + 1).map(|v| scale * v));
        let (f, a, b) = nystrom_factors(&mut ctx, q, k, m).unwrap();
        for t in [f, a, b] {
            let t = ctx.value(t);
            let cols = *t.shape().last().unwrap();
            for row in t.data().chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
