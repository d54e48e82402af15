//! Conditioners for affine couplings.
//!
//! The fusion network projects its input, runs a dense block and Nystrom
//! attention side by side on the projection, concatenates both and blends
//! them with BN-ReLU-Conv into the coupling's `(raw scale, shift)` channels.

mod nystrom;

pub use nystrom::{
    exact_attention, landmark_matrix, newton_schulz_pinv, nystrom_attention, nystrom_factors, NystromAttention,
};

use alloc::format;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Init};
use crate::params::{Ctx, ParamStore};
use crate::real::Real;
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    /// Dense block and attention in parallel.
    Fusion,
    /// Dense block only.
    Dense,
    /// Conv-ReLU-Conv-ReLU-Conv, as in Glow.
    Glow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingNetConfig {
    pub kind: CouplingKind,
    pub proj_channels: usize,
    pub dense_layers: usize,
    pub dense_growth: usize,
    pub attn_heads: usize,
    /// Upper bound; stages with fewer positions use one landmark per position.
    pub attn_landmarks: usize,
    pub pinv_iterations: usize,
    /// Hidden width of the Glow conditioner.
    pub glow_hidden: usize,
}

impl CouplingNetConfig {
    pub fn desk() -> Self {
        CouplingNetConfig {
            kind: CouplingKind::Fusion,
            proj_channels: 16,
            dense_layers: 3,
            dense_growth: 8,
            attn_heads: 1,
            attn_landmarks: 16,
            pinv_iterations: 6,
            glow_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("proj_channels", self.proj_channels),
            ("dense_layers", self.dense_layers),
            ("dense_growth", self.dense_growth),
            ("attn_landmarks", self.attn_landmarks),
            ("glow_hidden", self.glow_hidden),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("coupling.{} must be at least 1", k)));
            }
        }
        if self.attn_heads != 1 {
            return Err(Error::config(format!("coupling.attn_heads = {}: only a single head is supported", self.attn_heads)));
        }
        Ok(())
    }

    /// Channels entering the blend layer.
    pub fn blend_channels(&self) -> usize {
        let dense = self.proj_channels + self.dense_layers * self.dense_growth;
        match self.kind {
            CouplingKind::Fusion => dense + self.proj_channels,
            CouplingKind::Dense => dense,
            CouplingKind::Glow => self.glow_hidden,
        }
    }
}

/// Each layer sees the concatenation of the block input and all earlier
/// layer outputs and adds `growth` channels through BN-ReLU-Conv3x3.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<(BatchNorm2d, Conv2d)>,
    pub in_channels: usize,
    pub growth: usize,
}

impl DenseBlock {
    pub fn new<T: Real, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        layers: usize,
        growth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config(format!("{}: a dense block needs at least one layer", name)));
        }
        let mut ls = Vec::with_capacity(layers);
        for k in 0..layers {
            let c = in_channels + k * growth;
            let bn = BatchNorm2d::new(store, &format!("{}.{}.bn", name, k), c)?;
            let conv = Conv2d::new(store, &format!("{}.{}.conv", name, k), c, growth, 3, Init::He, rng)?;
            ls.push((bn, conv));
        }
        Ok(DenseBlock { layers: ls, in_channels, growth })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mut feats = x;
        for (bn, conv) in &self.layers {
            let h = bn.forward(ctx, feats)?;
            let h = ctx.tape.relu(h);
            let h = conv.forward(ctx, h)?;
            feats = ctx.tape.concat(&[feats, h], 1)?;
        }
        Ok(feats)
    }

    /// The convolutions of each layer, in order.
    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().map(|(_, c)| c)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(b, c)| b.param_count() + c.param_count()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct FusionNet {
    proj: Conv2d,
    dense: DenseBlock,
    attn: Option<NystromAttention>,
    norm: BatchNorm2d,
    blend: Conv2d,
}

impl FusionNet {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let p = self.proj.forward(ctx, x)?;
        let d = self.dense.forward(ctx, p)?;
        let cat = match &self.attn {
            Some(attn) => {
                let a = attn.forward(ctx, p)?;
                ctx.tape.concat(&[d, a], 1)?
            }
            None => d,
        };
        let h = self.norm.forward(ctx, cat)?;
        let h = ctx.tape.relu(h);
        self.blend.forward(ctx, h)
    }

    pub fn blend(&self) -> &Conv2d {
        &self.blend
    }

    pub fn dense(&self) -> &DenseBlock {
        &self.dense
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count()
            + self.dense.param_count()
            + self.attn.as_ref().map_or(0, |a| a.param_count())
            + self.norm.param_count()
            + self.blend.param_count()
    }
}

#[derive(Clone, Debug)]
pub struct GlowNet {
    first: Conv2d,
    second: Conv2d,
    last: Conv2d,
}

impl GlowNet {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.first.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        let h = self.second.forward(ctx, h)?;
        let h = ctx.tape.relu(h);
        self.last.forward(ctx, h)
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.second.param_count() + self.last.param_count()
    }
}

/// A coupling conditioner. The final layer is zero-initialized, so a fresh
/// network outputs zeros.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum CouplingNet {
    Fusion(FusionNet),
    Glow(GlowNet),
}

impl CouplingNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: &CouplingNetConfig,
        hw: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let blend_in = cfg.blend_channels();
        match cfg.kind {
            CouplingKind::Glow => Ok(CouplingNet::Glow(GlowNet {
                first: Conv2d::new(store, &format!("{}.conv0", name), in_channels, cfg.glow_hidden, 3, Init::He, rng)?,
                second: Conv2d::new(store, &format!("{}.conv1", name), cfg.glow_hidden, cfg.glow_hidden, 1, Init::He, rng)?,
                last: Conv2d::new(store, &format!("{}.conv2", name), blend_in, out_channels, 3, Init::Zero, rng)?,
            })),
            CouplingKind::Fusion | CouplingKind::Dense => {
                let p = cfg.proj_channels;
                let proj = Conv2d::new(store, &format!("{}.proj", name), in_channels, p, 1, Init::He, rng)?;
                let dense =
                    DenseBlock::new(store, &format!("{}.dense", name), p, cfg.dense_layers, cfg.dense_growth, rng)?;
                let attn = if cfg.kind == CouplingKind::Fusion {
                    let m = cfg.attn_landmarks.min(hw.0 * hw.1);
                    Some(NystromAttention::new(store, &format!("{}.attn", name), p, hw, m, cfg.pinv_iterations, rng)?)
                } else {
                    None
                };
                let norm = BatchNorm2d::new(store, &format!("{}.norm", name), blend_in)?;
                let blend = Conv2d::new(store, &format!("{}.blend", name), blend_in, out_channels, 3, Init::Zero, rng)?;
                Ok(CouplingNet::Fusion(FusionNet { proj, dense, attn, norm, blend }))
            }
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match self {
            CouplingNet::Fusion(n) => n.forward(ctx, x),
            CouplingNet::Glow(n) => n.forward(ctx, x),
        }
    }

    /// The zero-initialized output layer.
    pub fn output_layer(&self) -> &Conv2d {
        match self {
            CouplingNet::Fusion(n) => &n.blend,
            CouplingNet::Glow(n) => &n.last,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            CouplingNet::Fusion(n) => n.param_count(),
            CouplingNet::Glow(n) => n.param_count(),
        }
    }
}
