//! Bits per dimension and Monte-Carlo evaluation.
//!
//! Each example's noise for draw `j` comes from
//! `NoiseSource::from_keys(seed + j, [index])`, so results do not depend on
//! batching or on how a dataset is split between workers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::bijections::{scaling_correction, LikelihoodTerms};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::noise::NoiseSource;
use crate::params::Mode;
use crate::real::Real;
use crate::tensor::Tensor;

/// Anything that yields one stochastic draw of a per-example bound.
pub trait Likelihood<T: Real> {
    /// Data dimension `c * h * w`.
    fn dims(&self) -> usize;

    fn bound_draw(&mut self, x: &Tensor<T>, noise: &mut NoiseSource) -> Result<LikelihoodTerms>;
}

impl<T: Real> Likelihood<T> for FlowModel<T> {
    fn dims(&self) -> usize {
        FlowModel::dims(self)
    }

    fn bound_draw(&mut self, x: &Tensor<T>, noise: &mut NoiseSource) -> Result<LikelihoodTerms> {
        self.bound_once(x, noise, Mode::Eval)
    }
}

/// Uniform density on `[0, 1)^d`; exactly 8 bits per dimension.
#[derive(Clone, Copy, Debug)]
pub struct UniformModel {
    pub dims: usize,
}

impl<T: Real> Likelihood<T> for UniformModel {
    fn dims(&self) -> usize {
        self.dims
    }

    fn bound_draw(&mut self, x: &Tensor<T>, _noise: &mut NoiseSource) -> Result<LikelihoodTerms> {
        let b = x.shape().first().copied().unwrap_or(0);
        Ok(LikelihoodTerms {
            logdet: alloc::vec![0.0; b],
            noise: alloc::vec![0.0; b],
            prior: alloc::vec![0.0; b],
            dequant: alloc::vec![scaling_correction(self.dims); b],
        })
    }
}

/// `ln(mean(exp(v)))`, shifted by the maximum. Returns NaN for an empty input.
pub fn log_mean_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return f64::NAN;
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    let s: f64 = v.iter().map(|&x| Float::exp(x - m)).sum();
    m + Float::ln(s / v.len() as f64)
}

/// `-bound / (d ln 2)`.
pub fn bits_per_dim(bound_nats: f64, dims: usize) -> f64 {
    -bound_nats / (dims as f64 * core::f64::consts::LN_2)
}

/// Evaluation of a single example.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleEval {
    pub index: usize,
    /// Log-mean-exp over all draws, nats.
    pub bound: f64,
    /// First draw alone, nats.
    pub bound_single: f64,
    /// `[logdet, noise, prior, dequant]` averaged over draws, nats.
    pub terms: [f64; 4],
}

/// Evaluates the examples at `indices` in batches of `batch_size`.
pub fn evaluate_examples<T: Real, M: Likelihood<T> + ?Sized>(
    model: &mut M,
    data: &ImageDataset,
    indices: &[usize],
    mc_samples: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<ExampleEval>> {
    if mc_samples == 0 {
        return Err(Error::Contract(String::from("mc_samples must be at least 1")));
    }
    if batch_size == 0 {
        return Err(Error::Contract(String::from("batch_size must be at least 1")));
    }
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size) {
        let x = data.batch::<T>(chunk, None)?;
        let keys: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
        let mut draws: Vec<Vec<f64>> = alloc::vec![Vec::with_capacity(mc_samples); chunk.len()];
        let mut terms = alloc::vec![[0.0f64; 4]; chunk.len()];
        for j in 0..mc_samples {
            let mut noise = NoiseSource::from_keys(seed.wrapping_add(j as u64), &keys);
            let t = model.bound_draw(&x, &mut noise)?;
            let total = t.total();
            for e in 0..chunk.len() {
                draws[e].push(total[e]);
                let parts = [t.logdet[e], t.noise[e], t.prior[e], t.dequant[e]];
                for (acc, p) in terms[e].iter_mut().zip(parts) {
                    *acc += p / mc_samples as f64;
                }
            }
        }
        for (e, &index) in chunk.iter().enumerate() {
            out.push(ExampleEval {
                index,
                bound: log_mean_exp(draws[e].iter().copied()),
                bound_single: draws[e][0],
                terms: terms[e],
            });
        }
    }
    Ok(out)
}

/// Bound components in bits per dimension; they sum to the mean single-draw bpd
/// averaged over draws.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub logdet: f64,
    pub noise: f64,
    pub prior: f64,
    pub dequant: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub dims: usize,
    pub mc_samples: usize,
    pub bpd_mean: f64,
    pub bpd_std_error: f64,
    /// The same statistics for the first draw alone.
    pub bpd_single_mean: f64,
    pub bpd_single_std_error: f64,
    pub breakdown: Breakdown,
    pub per_example_bpd: Vec<f64>,
}

/// Mean and standard error (sample std over `sqrt(n)`).
pub fn mean_and_std_error(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Float::sqrt(var / n))
}

impl EvalReport {
    /// Examples must be in dataset order for `per_example_bpd` to follow it.
    pub fn from_examples(examples: &[ExampleEval], dims: usize, mc_samples: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Data(String::from("cannot evaluate an empty dataset")));
        }
        let per: Vec<f64> = examples.iter().map(|e| bits_per_dim(e.bound, dims)).collect();
        let single: Vec<f64> = examples.iter().map(|e| bits_per_dim(e.bound_single, dims)).collect();
        let (bpd_mean, bpd_std_error) = mean_and_std_error(&per);
        let (bpd_single_mean, bpd_single_std_error) = mean_and_std_error(&single);
        let n = examples.len() as f64;
        let part = |k: usize| examples.iter().map(|e| bits_per_dim(e.terms[k], dims)).sum::<f64>() / n;
        Ok(EvalReport {
            examples: examples.len(),
            dims,
            mc_samples,
            bpd_mean,
            bpd_std_error,
            bpd_single_mean,
            bpd_single_std_error,
            breakdown: Breakdown { logdet: part(0), noise: part(1), prior: part(2), dequant: part(3) },
            per_example_bpd: per,
        })
    }

    /// One `key value` pair per line.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let rows: [(&str, String); 11] = [
            ("examples", format!("{}", self.examples)),
            ("dims", format!("{}", self.dims)),
            ("mc_samples", format!("{}", self.mc_samples)),
            ("bpd", format!("{:.6}", self.bpd_mean)),
            ("bpd_std_error", format!("{:.6}", self.bpd_std_error)),
            ("bpd_single", format!("{:.6}", self.bpd_single_mean)),
            ("bpd_single_std_error", format!("{:.6}", self.bpd_single_std_error)),
            ("bits_logdet", format!("{:.6}", self.breakdown.logdet)),
            ("bits_noise", format!("{:.6}", self.breakdown.noise)),
            ("bits_prior", format!("{:.6}", self.breakdown.prior)),
            ("bits_dequant", format!("{:.6}", self.breakdown.dequant)),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{} {}", k, v);
        }
        s
    }
}

/// Evaluates every image of `data`.
pub fn evaluate<T: Real, M: Likelihood<T> + ?Sized>(
    model: &mut M,
    data: &ImageDataset,
    mc_samples: usize,
    batch_size: usize,
    seed: u64,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data(String::from("cannot evaluate an empty dataset")));
    }
    let indices: Vec<usize> = (0..data.count).collect();
    let ex = evaluate_examples(model, data, &indices, mc_samples, batch_size, seed)?;
    EvalReport::from_examples(&ex, model.dims(), mc_samples)
}
