//! The `denseflow` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format error, 3 numeric or
//! training failure, 4 verification failure. Every command first prints the
//! settings it resolved.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use denseflow_core::data::{synth_textures, ImageDataset, Split};
use denseflow_core::flow::FlowConfig;
use denseflow_core::real::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_parallel, thread_count};
use crate::format::{encode_ppm, import_planar, read_checkpoint, read_dataset, write_dataset};
use crate::train::{self, TrainRun};
use crate::verify::{run_suite, SuiteSize};

#[derive(Parser, Debug)]
#[command(name = "denseflow", version, about = "Densely connected normalizing flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model, or continue a checkpoint with --resume.
    Train(TrainArgs),
    /// Bits per dimension of a dataset under a checkpoint.
    Eval(EvalArgs),
    /// Draw images from a checkpoint as binary PPM files.
    Sample(SampleArgs),
    /// Run the property suite.
    Verify(VerifyArgs),
    /// Convert raw planar u8 images into a DFIM file.
    Import(ImportArgs),
    /// Parameter counts and the shape trace of a model.
    Info(InfoArgs),
}

/// A DFIM path, or `synth:N[:SEED]` for `N` generated images at the model's
/// resolution.
#[derive(Args, Debug)]
pub struct DataArg {
    #[arg(long)]
    pub data: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML run configuration; the desk presets when omitted.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    /// Stop after this many steps of this invocation.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Progress line every this many steps (0 for none).
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArg,
    /// Noise draws per image; the bound tightens as this grows.
    #[arg(long, default_value_t = 1)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0.8)]
    pub temperature: f64,
    /// Output directory for `sample-NNNN.ppm`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Small sample sizes and no published presets.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    /// Raw u8 pixels in planar `[n, c, h, w]` order.
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub channels: usize,
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InfoArgs {
    /// Model preset name.
    #[arg(long, conflicts_with_all = ["config", "ckpt"])]
    pub preset: Option<String>,
    #[arg(long, conflicts_with = "ckpt")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{}", text) } else { write!(err, "{}", text) };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e);
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Sample(a) => cmd_sample(a, out),
        Command::Verify(a) => cmd_verify(a, out),
        Command::Import(a) => cmd_import(a, out),
        Command::Info(a) => cmd_info(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn emit_config(out: &mut dyn Write, cfg: &RunConfig) -> Result<()> {
    emit(out, &format!("# resolved config\n{}# end config\n", cfg.to_toml()))
}

/// Loads `spec`, a DFIM path or `synth:N[:SEED]`, and checks it against the model's image shape.
pub fn load_data(spec: &str, model: &FlowConfig, split: Split) -> Result<ImageDataset> {
    let im = model.image;
    let d = match spec.strip_prefix("synth:") {
        Some(rest) => {
            let mut it = rest.splitn(2, ':');
            let bad = || Error::Usage(format!("`{}`: expected synth:N or synth:N:SEED", spec));
            let n: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let seed: u64 = match it.next() {
                Some(s) => s.parse().map_err(|_| bad())?,
                None => 0,
            };
            let mut d = synth_textures(n, im.height, im.width, im.channels, seed)?;
            d.split = split;
            d
        }
        None => read_dataset(Path::new(spec), split)?,
    };
    if (d.channels, d.height, d.width) != (im.channels, im.height, im.width) {
        return Err(Error::Core(denseflow_core::error::Error::Data(format!(
            "{}: images are {}x{}x{}, the model expects {}x{}x{}",
            spec, d.channels, d.height, d.width, im.channels, im.height, im.width
        ))));
    }
    Ok(d)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let run = TrainRun { out_dir: &a.out, max_steps: a.max_steps, log_every: a.log_every };
    let (cfg, mut tr) = match &a.resume {
        Some(p) => train::resume_trainer(&read_checkpoint(p)?)?,
        None => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let tr = train::new_trainer(&cfg)?;
            (cfg, tr)
        }
    };
    emit_config(out, &cfg)?;
    let data = load_data(&a.data.data, &cfg.model, Split::Train)?;
    let s = train::train(&cfg, &mut tr, &data, &run, err)?;
    let mut text = format!(
        "steps_run {}\nstep {}\nepoch {}\nfinished {}\ncheckpoint {}\n",
        s.steps_run,
        s.step,
        s.epoch,
        s.finished,
        s.checkpoint.display()
    );
    if let Some(l) = s.last {
        text.push_str(&format!("last_bpd {:.6}\n", l.bpd));
    }
    emit(out, &text)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, model) = train::load_model(&read_checkpoint(&a.ckpt)?)?;
    emit_config(out, &cfg)?;
    let threads = thread_count()?;
    emit(out, &format!("mc_samples {}\nbatch_size {}\nseed {}\nthreads {}\n", a.mc_samples, a.batch_size, a.seed, threads))?;
    let data = load_data(&a.data.data, &cfg.model, Split::Test)?;
    let report = evaluate_parallel(&model, &data, a.mc_samples, a.batch_size, a.seed, threads)?;
    emit(out, &report.to_key_value())
}

fn cmd_sample(a: SampleArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, mut model) = train::load_model(&read_checkpoint(&a.ckpt)?)?;
    emit_config(out, &cfg)?;
    emit(out, &format!("n {}\ntemperature {}\nseed {}\n", a.n, a.temperature, a.seed))?;
    let im = cfg.model.image;
    if im.channels != 3 {
        return Err(Error::Usage(format!("PPM output needs 3 channels, the model has {}", im.channels)));
    }
    if a.n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (px, _) = model.sample(a.n, a.temperature, &mut rng)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let d = im.dims();
    let bytes: Vec<u8> = px.data().iter().map(|v| v.as_f64() as u8).collect();
    for (i, img) in bytes.chunks(d).enumerate() {
        let p = a.out.join(format!("sample-{:04}.ppm", i));
        fs::write(&p, encode_ppm(img, im.height, im.width)).map_err(|e| Error::io(&p, e))?;
    }
    emit(out, &format!("wrote {} images to {}\n", a.n, a.out.display()))
}

fn cmd_verify(a: VerifyArgs, out: &mut dyn Write) -> Result<()> {
    let size = if a.quick { SuiteSize::quick() } else { SuiteSize::full() };
    emit(out, &format!("# suite {:?}\n# seed {}\n", size, a.seed))?;
    let mut io_err = None;
    let checks = run_suite(&size, a.seed, |c| {
        if let Err(e) = writeln!(out, "{}", c).and_then(|_| out.flush()) {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(Error::io("<stdout>", e));
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed && !c.informational).map(|c| c.name.as_str()).collect();
    emit(out, &format!("{} checks, {} failed\n", checks.len(), failed.len()))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(failed.join(", ")))
    }
}

fn cmd_import(a: ImportArgs, out: &mut dyn Write) -> Result<()> {
    emit(
        out,
        &format!("count {}\nchannels {}\nheight {}\nwidth {}\n", a.count, a.channels, a.height, a.width),
    )?;
    let bytes = fs::read(&a.raw).map_err(|e| Error::io(&a.raw, e))?;
    let d = import_planar(bytes, a.count, a.channels, a.height, a.width)?;
    write_dataset(&a.out, &d)?;
    emit(out, &format!("wrote {} images to {}\n", d.count, a.out.display()))
}

fn cmd_info(a: InfoArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = match (&a.preset, &a.config, &a.ckpt) {
        (Some(name), _, _) => {
            let model = FlowConfig::preset(name).ok_or_else(|| {
                Error::Usage(format!("unknown preset `{}` (known: {})", name, FlowConfig::preset_names().join(", ")))
            })?;
            RunConfig { model, ..RunConfig::default() }
        }
        (_, Some(p), _) => RunConfig::load(p)?,
        (_, _, Some(p)) => train::load_model(&read_checkpoint(p)?)?.0,
        _ => RunConfig::default(),
    };
    emit_config(out, &cfg)?;
    let model = denseflow_core::flow::FlowModel::<f32>::build(&cfg.model)?;
    let d = model.net.dims;
    let mut text = format!(
        "model {}\nparameters {}\nmodules {}\ndims input {} noise {} latent {} factored {}\n",
        cfg.model.name,
        model.param_count(),
        cfg.model.module_count(),
        d.input,
        d.noise,
        d.latent,
        d.factored
    );
    for s in &model.net.trace {
        text.push_str(&format!("stage {} {}x{}x{} params {}\n", s.name, s.shape[0], s.shape[1], s.shape[2], s.params));
    }
    emit(out, &text)
}
