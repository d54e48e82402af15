//! Configuration and assembly of the multi-scale DenseFlow model.

mod config;
mod model;

pub use config::{BlockConfig, FactorPrior, FlowConfig, ImageShape, DESK_PRESET, PAPER_DENSE_GROWTH};
pub use model::{
    Block, Bound, DimensionAccount, Encoded, Encoding, FlowModel, GlowModule, Latents, LossGrad, Network, StageInfo,
    Unit,
};
