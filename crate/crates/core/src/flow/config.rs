use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bijections::DequantMode;
use crate::coupling_net::{CouplingKind, CouplingNetConfig};
use crate::cross_unit::{ContextMode, NoiseMode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn dims(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub units: usize,
    pub modules_per_unit: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorPrior {
    /// Mean and log-scale from the retained half.
    Conditional,
    /// N(0, I).
    Unconditional,
}

/// Declarative description of a DenseFlow-L-k model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub name: String,
    pub image: ImageShape,
    pub blocks: Vec<BlockConfig>,
    /// Noise channels appended at every cross-unit point.
    pub growth_rate: usize,
    pub noise: NoiseMode,
    pub context: ContextMode,
    /// Hidden width of the cross-unit conditioners.
    pub conditioner_hidden: usize,
    pub coupling: CouplingNetConfig,
    pub dequantization: DequantMode,
    pub factor_prior: FactorPrior,
    /// Squeeze the image once before the first block.
    pub initial_squeeze: bool,
    pub seed: u64,
}

pub const DESK_PRESET: &str = "DenseFlow-12-4";

impl FlowConfig {
    /// 2 blocks of 2 units with 3 modules each, growth rate 4, on 3x8x8 images.
    pub fn desk() -> Self {
        FlowConfig {
            name: DESK_PRESET.to_string(),
            image: ImageShape { channels: 3, height: 8, width: 8 },
            blocks: vec![BlockConfig { units: 2, modules_per_unit: 3 }; 2],
            growth_rate: 4,
            noise: NoiseMode::Preconditioned,
            context: ContextMode::Dense,
            conditioner_hidden: 16,
            coupling: CouplingNetConfig::desk(),
            dequantization: DequantMode::Uniform,
            factor_prior: FactorPrior::Conditional,
            initial_squeeze: false,
            seed: 0,
        }
    }

    fn paper_coupling() -> CouplingNetConfig {
        CouplingNetConfig {
            kind: CouplingKind::Fusion,
            proj_channels: 48,
            dense_layers: 7,
            dense_growth: PAPER_DENSE_GROWTH,
            attn_heads: 1,
            attn_landmarks: 64,
            pinv_iterations: 6,
            glow_hidden: 512,
        }
    }

    fn paper(name: &str, blocks: &[(usize, usize)], k: usize) -> Self {
        FlowConfig {
            name: name.to_string(),
            image: ImageShape { channels: 3, height: 32, width: 32 },
            blocks: blocks.iter().map(|&(units, modules_per_unit)| BlockConfig { units, modules_per_unit }).collect(),
            growth_rate: k,
            noise: NoiseMode::Preconditioned,
            context: ContextMode::Dense,
            conditioner_hidden: 48,
            coupling: Self::paper_coupling(),
            dequantization: DequantMode::Variational,
            factor_prior: FactorPrior::Conditional,
            initial_squeeze: false,
            seed: 0,
        }
    }

    /// The 74-module, growth-rate-10 model for 3x32x32 images.
    pub fn denseflow_74_10() -> Self {
        Self::paper("DenseFlow-74-10", &[(6, 5), (4, 6), (1, 20)], 10)
    }

    /// The 45-module, growth-rate-6 model used for ablations.
    pub fn denseflow_45_6() -> Self {
        Self::paper("DenseFlow-45-6", &[(5, 3), (3, 5), (1, 15)], 6)
    }

    /// Looks up a preset by (case-insensitive) name.
    pub fn preset(name: &str) -> Option<Self> {
        let all = [Self::desk(), Self::denseflow_45_6(), Self::denseflow_74_10()];
        all.into_iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn preset_names() -> [&'static str; 3] {
        [DESK_PRESET, "DenseFlow-45-6", "DenseFlow-74-10"]
    }

    /// The same topology with a different cross-unit mode and coupling kind.
    /// Without augmentation the unit boundaries are kept but carry no noise.
    pub fn ablation(&self, noise: NoiseMode, kind: CouplingKind) -> Self {
        let mut c = self.clone();
        c.noise = noise;
        c.coupling.kind = kind;
        let n = match noise {
            NoiseMode::None => "plain",
            NoiseMode::White => "white",
            NoiseMode::Preconditioned => "precond",
        };
        let k = match kind {
            CouplingKind::Fusion => "fusion",
            CouplingKind::Dense => "dense",
            CouplingKind::Glow => "glow",
        };
        c.name = format!("{}/{}-{}", self.name, n, k);
        c
    }

    /// Total number of invertible glow-like modules.
    pub fn module_count(&self) -> usize {
        self.blocks.iter().map(|b| b.units * b.modules_per_unit).sum()
    }

    /// Noise channels per cross-unit point; zero without augmentation.
    pub fn effective_growth(&self) -> usize {
        if self.noise == NoiseMode::None {
            0
        } else {
            self.growth_rate
        }
    }

    pub fn squeeze_count(&self) -> usize {
        usize::from(self.initial_squeeze) + self.blocks.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let im = &self.image;
        if im.channels == 0 || im.height == 0 || im.width == 0 {
            return Err(Error::config(format!("image shape {:?} has an empty extent", im)));
        }
        if self.blocks.is_empty() {
            return Err(Error::config("at least one block is required"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.units == 0 || b.modules_per_unit == 0 {
                return Err(Error::config(format!(
                    "block {}: units and modules_per_unit must be at least 1 (got {} and {})",
                    i, b.units, b.modules_per_unit
                )));
            }
        }
        let f = 1usize << self.squeeze_count();
        if !im.height.is_multiple_of(f) || !im.width.is_multiple_of(f) {
            return Err(Error::config(format!(
                "{}x{} images cannot be squeezed {} times",
                im.height,
                im.width,
                self.squeeze_count()
            )));
        }
        if self.noise == NoiseMode::Preconditioned && self.conditioner_hidden == 0 {
            return Err(Error::config("conditioner_hidden must be at least 1"));
        }
        self.coupling.validate()
    }
}

/// Dense-block growth for the published presets, chosen so that
/// DenseFlow-74-10 has roughly 130M parameters (131.2M).
pub const PAPER_DENSE_GROWTH: usize = 67;
