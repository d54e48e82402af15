//! File formats, run configuration, the training driver, the verification
//! suite and the `denseflow` command line, on top of `denseflow-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod format;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
