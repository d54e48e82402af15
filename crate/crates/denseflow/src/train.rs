//! Training driver: checkpoints, metrics log and resumption.
//!
//! An output directory holds `config.toml` (the resolved configuration),
//! `metrics.jsonl` (one JSON object per step), `step-NNNNNN.dfck` every
//! `checkpoint_every` steps, `last.dfck` (the most recent state) and
//! `final.dfck` once the schedule completes. If training diverges, `last.dfck`
//! holds the state before the failing step.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use denseflow_core::data::ImageDataset;
use denseflow_core::flow::FlowModel;
use denseflow_core::trainer::{Checkpoint, StepLog, Trainer};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::format::{read_checkpoint, write_checkpoint};

pub fn new_trainer(cfg: &RunConfig) -> Result<Trainer<f32>> {
    let model = FlowModel::<f32>::build(&cfg.model)?;
    Ok(Trainer::new(model, cfg.train.clone())?)
}

/// Rebuilds the trainer stored in a checkpoint.
pub fn resume_trainer(ck: &Checkpoint) -> Result<(RunConfig, Trainer<f32>)> {
    let cfg = RunConfig::from_toml(&ck.config)?;
    let mut tr = new_trainer(&cfg)?;
    tr.restore(ck)?;
    Ok((cfg, tr))
}

/// Model with the parameters of a checkpoint, for evaluation and sampling.
pub fn load_model(ck: &Checkpoint) -> Result<(RunConfig, FlowModel<f32>)> {
    let cfg = RunConfig::from_toml(&ck.config)?;
    let mut model = FlowModel::<f32>::build(&cfg.model)?;
    ck.load_params(&mut model.store)?;
    Ok((cfg, model))
}

pub fn checkpoint_of(cfg: &RunConfig, tr: &Trainer<f32>) -> Checkpoint {
    tr.to_checkpoint(cfg.to_toml())
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub step: u64,
    pub epoch: usize,
    pub finished: bool,
    pub last: Option<StepLog>,
    pub checkpoint: PathBuf,
}

pub struct TrainRun<'a> {
    pub out_dir: &'a Path,
    /// Stop after this many steps even if the schedule continues.
    pub max_steps: Option<u64>,
    /// Progress line every this many steps; 0 disables progress output.
    pub log_every: u64,
}

/// Trains `tr` on `data`, writing into `run.out_dir`.
pub fn train(cfg: &RunConfig, tr: &mut Trainer<f32>, data: &ImageDataset, run: &TrainRun, log: &mut dyn Write) -> Result<TrainSummary> {
    let dir = run.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let last_path = dir.join("last.dfck");
    let mut steps_run = 0u64;
    let mut last = None;
    while !tr.is_finished() && run.max_steps.is_none_or(|m| steps_run < m) {
        let l = match tr.step(data) {
            Ok(l) => l,
            Err(e) => {
                write_checkpoint(&last_path, &checkpoint_of(cfg, tr))?;
                let _ = writeln!(log, "stopped: {}; last good state in {}", e, last_path.display());
                return Err(e.into());
            }
        };
        let line = serde_json::to_string(&l).expect("step logs serialize");
        writeln!(metrics, "{}", line).map_err(|e| Error::io(&metrics_path, e))?;
        steps_run += 1;
        if run.log_every > 0 && (l.step + 1) % run.log_every == 0 {
            let _ = writeln!(
                log,
                "step {} epoch {} lr {:.3e} bpd {:.4} grad_norm {:.3} min|s| {:.4}",
                l.step + 1,
                l.epoch,
                l.lr,
                l.bpd,
                l.grad_norm,
                l.min_scale
            );
        }
        if cfg.checkpoint_every > 0 && tr.state.step.is_multiple_of(cfg.checkpoint_every) {
            let ck = checkpoint_of(cfg, tr);
            write_checkpoint(&dir.join(format!("step-{:06}.dfck", tr.state.step)), &ck)?;
            write_checkpoint(&last_path, &ck)?;
        }
        last = Some(l);
    }
    let ck = checkpoint_of(cfg, tr);
    write_checkpoint(&last_path, &ck)?;
    let finished = tr.is_finished();
    let checkpoint = if finished {
        let p = dir.join("final.dfck");
        write_checkpoint(&p, &ck)?;
        p
    } else {
        last_path
    };
    Ok(TrainSummary { steps_run, step: tr.state.step, epoch: tr.state.epoch, finished, last, checkpoint })
}

/// Loads `path` and continues training where it stopped.
pub fn resume(path: &Path, data: &ImageDataset, run: &TrainRun, log: &mut dyn Write) -> Result<TrainSummary> {
    let ck = read_checkpoint(path)?;
    let (cfg, mut tr) = resume_trainer(&ck)?;
    train(&cfg, &mut tr, data, run, log)
}
