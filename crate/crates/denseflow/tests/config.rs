use denseflow::config::{train_preset, RunConfig, TRAIN_PRESETS};
use denseflow::Error;
use denseflow_core::coupling_net::CouplingKind;
use denseflow_core::cross_unit::NoiseMode;
use denseflow_core::flow::FlowConfig;
use denseflow_core::trainer::TrainConfig;

#[test]
fn empty_text_is_the_desk_setup() {
    let c = RunConfig::from_toml("").unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!(c.model, FlowConfig::desk());
    assert_eq!(c.train, TrainConfig::desk());
}

#[test]
fn presets_with_overrides() {
    let c = RunConfig::from_toml(
        "checkpoint_every = 7\n[model]\npreset = \"DenseFlow-45-6\"\ngrowth_rate = 8\n[model.coupling]\nkind = \"glow\"\n[train]\npreset = \"cifar10\"\nlr = 0.002\n",
    )
    .unwrap();
    assert_eq!(c.checkpoint_every, 7);
    assert_eq!(c.model.name, "DenseFlow-45-6");
    assert_eq!(c.model.growth_rate, 8);
    assert_eq!(c.model.coupling.kind, CouplingKind::Glow);
    assert_eq!(c.model.coupling.attn_landmarks, FlowConfig::denseflow_45_6().coupling.attn_landmarks);
    assert_eq!(c.train.lr, 0.002);
    assert_eq!(c.train.epochs, TrainConfig::cifar10().epochs);
}

#[test]
fn unknown_keys_and_presets_are_config_errors() {
    for text in [
        "bogus = 1\n",
        "[model]\nbogus = 1\n",
        "[train]\nlearning_rate = 1.0\n",
        "[model]\npreset = \"DenseFlow-1-1\"\n",
        "[train]\npreset = \"mnist\"\n",
        "checkpoint_every = -1\n",
        "[model]\nnoise = \"pink\"\n",
        "not toml [",
    ] {
        let e = RunConfig::from_toml(text).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{:?}: {}", text, e);
        assert_eq!(e.exit_code(), 2);
    }
}

#[test]
fn invalid_values_are_rejected_after_merging() {
    let e = RunConfig::from_toml("[train]\nbatch_size = 1\n").unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(RunConfig::from_toml("[model.image]\nchannels = 3\nheight = 5\nwidth = 5\n").is_err());
}

#[test]
fn canonical_text_round_trips() {
    let c = RunConfig {
        model: FlowConfig::denseflow_74_10().ablation(NoiseMode::White, CouplingKind::Dense),
        train: TrainConfig::imagenet64(),
        checkpoint_every: 3,
    };
    let text = c.to_toml();
    let back = RunConfig::from_toml(&text).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_toml(), text);
}

#[test]
fn every_named_training_preset_resolves() {
    for name in TRAIN_PRESETS {
        let t = train_preset(name).unwrap();
        t.validate().unwrap();
        assert_eq!(train_preset(&name.to_uppercase()), Some(t));
    }
    assert_eq!(train_preset("imagenet32").unwrap().warmup_steps, 5000);
}
