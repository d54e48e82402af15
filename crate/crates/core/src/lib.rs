//! Densely connected normalizing flows on a small reverse-mode tensor engine.
//!
//! The crate is `no_std` (it needs `alloc`) and carries no IO: file formats,
//! configuration files and the command line live in the `denseflow` crate.
//!
//! Layout of the crate:
//!
//! - [`tensor`]: dense tensors and the differentiation [`Tape`](tensor::Tape).
//! - [`params`]: named parameter storage and the per-pass [`Ctx`](params::Ctx).
//! - [`nn`]: non-invertible building blocks (convolution, batch norm).
//! - [`bijections`]: ActNorm, invertible 1x1 convolution, affine coupling,
//!   squeeze, factor-out and dequantization.
//! - [`coupling_net`]: the dense-block + Nystrom attention coupling network.
//! - [`cross_unit`]: noise augmentation between flow units.
//! - [`flow`]: configuration and assembly of the multi-scale model.
//! - [`estimator`]: bits/dim and Monte-Carlo evaluation.
//! - [`trainer`]: Adamax, learning-rate schedule and the training state machine.
//! - [`data`]: image datasets and the synthetic texture generator.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod bijections;
pub mod check;
pub mod coupling_net;
pub mod cross_unit;
pub mod data;
pub mod error;
pub mod estimator;
pub mod flow;
pub mod nn;
pub mod noise;
pub mod params;
pub mod real;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
