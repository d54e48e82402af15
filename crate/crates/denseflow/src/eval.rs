//! Multi-threaded evaluation. Results equal the single-threaded estimator bit
//! for bit because every example's noise depends only on its index.

use std::num::NonZeroUsize;
use std::thread;

use denseflow_core::data::ImageDataset;
use denseflow_core::estimator::{evaluate_examples, EvalReport, ExampleEval};
use denseflow_core::flow::FlowModel;
use denseflow_core::real::Real;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "DENSEFLOW_THREADS";

/// Worker count: `DENSEFLOW_THREADS` if set, else the available parallelism.
pub fn thread_count() -> Result<usize> {
    let hw = thread::available_parallelism().map_or(1, NonZeroUsize::get);
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(hw),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Usage(format!("{} must be a positive integer, got `{}`", THREADS_ENV, s))),
        },
    }
}

pub fn evaluate_parallel<T: Real>(
    model: &FlowModel<T>,
    data: &ImageDataset,
    mc_samples: usize,
    batch_size: usize,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(denseflow_core::error::Error::Data("cannot evaluate an empty dataset".into()).into());
    }
    let indices: Vec<usize> = (0..data.count).collect();
    let per = data.count.div_ceil(threads.max(1));
    let parts: Vec<Result<Vec<ExampleEval>>> = thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(per)
            .map(|chunk| {
                let mut m = model.clone();
                s.spawn(move || Ok(evaluate_examples(&mut m, data, chunk, mc_samples, batch_size, seed)?))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut all = Vec::with_capacity(data.count);
    for p in parts {
        all.extend(p?);
    }
    Ok(EvalReport::from_examples(&all, model.dims(), mc_samples)?)
}
