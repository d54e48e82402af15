use std::fs;
use std::path::Path;

use denseflow::cli::run;

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv: Vec<String> = std::iter::once("denseflow").chain(args.iter().copied()).map(String::from).collect();
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no `{}` in\n{}", key, text))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(call(&[]).0, 1);
    assert_eq!(call(&["frobnicate"]).0, 1);
    assert_eq!(call(&["eval", "--ckpt", "x"]).0, 1);
    assert_eq!(call(&["info", "--preset", "nope"]).0, 1);
    let (code, out, _) = call(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("train"));
}

#[test]
fn missing_or_malformed_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.dfck");
    fs::write(&junk, b"DFCK\x01").unwrap();
    assert_eq!(call(&["eval", "--ckpt", p(&junk), "--data", "synth:4"]).0, 2);
    assert_eq!(call(&["eval", "--ckpt", p(&dir.path().join("none.dfck")), "--data", "synth:4"]).0, 2);
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nwat = 1\n").unwrap();
    let (code, _, err) = call(&["train", "--config", p(&cfg), "--data", "synth:8", "--out", p(dir.path())]);
    assert_eq!(code, 2);
    assert!(err.contains("wat"), "{}", err);
}

#[test]
fn info_lists_the_stages() {
    let (code, out, _) = call(&["info", "--preset", "DenseFlow-12-4"]);
    assert_eq!(code, 0);
    assert_eq!(value(&out, "modules"), "12");
    let stages: Vec<&str> = out.lines().filter(|l| l.starts_with("stage ")).collect();
    assert!(stages.iter().any(|l| l.starts_with("stage input 3x8x8")));
    let total: usize = stages.iter().map(|l| l.rsplit(' ').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(value(&out, "parameters").parse::<usize>().unwrap(), total);
}

#[test]
fn import_writes_a_readable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("x.raw");
    fs::write(&raw, (0..2 * 3 * 8 * 8).map(|i| i as u8).collect::<Vec<u8>>()).unwrap();
    let dfim = dir.path().join("x.dfim");
    let args = ["import", "--raw", p(&raw), "--count", "2", "--channels", "3", "--height", "8", "--width", "8", "--out", p(&dfim)];
    assert_eq!(call(&args).0, 0);
    assert_eq!(denseflow::format::read_dataset(&dfim, denseflow_core::data::Split::Test).unwrap().count, 2);
    let short = ["import", "--raw", p(&raw), "--count", "3", "--channels", "3", "--height", "8", "--width", "8", "--out", p(&dfim)];
    assert_eq!(call(&short).0, 2);
}

#[test]
fn train_eval_sample_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "checkpoint_every = 0\n[model.coupling]\nkind = \"glow\"\nglow_hidden = 8\n[train]\nbatch_size = 8\n").unwrap();
    let (code, out, err) =
        call(&["train", "--config", p(&cfg), "--data", "synth:32:3", "--out", p(&run_dir), "--max-steps", "3", "--log-every", "0"]);
    assert_eq!(code, 0, "{}", err);
    assert!(out.starts_with("# resolved config\n"));
    assert_eq!(value(&out, "step"), "3");
    let ckpt = value(&out, "checkpoint").to_string();
    assert!(Path::new(&ckpt).exists());

    let (code, out, _) = call(&["train", "--resume", &ckpt, "--data", "synth:32:3", "--out", p(&run_dir), "--max-steps", "2", "--log-every", "0"]);
    assert_eq!(code, 0);
    assert_eq!(value(&out, "step"), "5");

    let eval = |mc: &str| {
        let (code, out, _) = call(&["eval", "--ckpt", &ckpt, "--data", "synth:16:9", "--mc-samples", mc, "--seed", "1"]);
        assert_eq!(code, 0);
        value(&out, "bpd").parse::<f64>().unwrap()
    };
    let (b1, b1_again, b20) = (eval("1"), eval("1"), eval("20"));
    assert_eq!(b1, b1_again);
    assert!(b1.is_finite() && b1 < 8.0, "{}", b1);
    assert!(b20 <= b1 + 0.01, "{} vs {}", b20, b1);

    let draw = |name: &str, seed: &str| {
        let d = dir.path().join(name);
        let (code, _, err) = call(&["sample", "--ckpt", &ckpt, "--n", "2", "--temperature", "0", "--seed", seed, "--out", p(&d)]);
        assert_eq!(code, 0, "{}", err);
        (fs::read(d.join("sample-0000.ppm")).unwrap(), fs::read(d.join("sample-0001.ppm")).unwrap())
    };
    let a = draw("a", "1");
    assert_eq!(a, draw("b", "2"));
    assert!(a.0.starts_with(b"P6\n8 8\n255\n"));
    assert_eq!(a.0.len(), 11 + 3 * 64);
}
