//! Dense matching: multi-level hypercorrelation between query and support
//! features, center-pivot 4D encoding, and a 2D decoder to the visual prompt.

pub mod correlation;
pub mod cp4d;

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, ParamGroup, ParamStore, Scope};
use crate::vision::FeaturePyramid;

pub use correlation::{
    build_hypercorrelation, mask_tensor, resample_volume, stack_hypercorrelations, Hypercorrelation,
    COSINE_EPS,
};
pub use cp4d::{cp4d_conv, Cp4dKernel, Cp4dStride};

/// Decoder conditioning from the matching branch.
#[derive(Debug, Clone)]
pub struct VisualPrompt {
    /// `(B, d_p, H_p, W_p)`
    pub dense_map: Tensor,
    /// `(B, d_p)`, spatial mean of `dense_map`.
    pub pooled: Tensor,
}

impl VisualPrompt {
    pub fn from_dense(dense_map: Tensor) -> Result<Self> {
        let pooled = dense_map.mean(3)?.mean(2)?;
        Ok(Self { dense_map, pooled })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchingConfig {
    /// Working resolution of every correlation level.
    pub hp: usize,
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    pub groups: usize,
    pub mask_support: bool,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            hp: 16,
            encoder_channels: vec![16, 32, 64],
            kernel: 3,
            groups: 4,
            mask_support: true,
        }
    }
}

#[derive(Debug, Clone)]
struct Block4d {
    kernel: Cp4dKernel,
    norm: GroupNorm,
}

/// Stack of center-pivot blocks that squeezes the support pair, then averages it out.
#[derive(Debug, Clone)]
pub struct Encoder4d {
    blocks: Vec<Block4d>,
}

impl Encoder4d {
    pub fn new(scope: &mut Scope, levels: usize, channels: &[usize], k: usize, groups: usize) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("4D encoder needs at least one block".into()));
        }
        let mut blocks = Vec::with_capacity(channels.len());
        let mut c_in = levels;
        for (i, &c) in channels.iter().enumerate() {
            if c % groups != 0 {
                return Err(Error::Config(format!("encoder width {c} not divisible by {groups} groups")));
            }
            let mut s = scope.sub(&format!("block{i}"));
            blocks.push(Block4d {
                kernel: Cp4dKernel::new(&mut s.sub("cp4d"), c_in, c, k)?,
                norm: GroupNorm::new(&mut s.sub("gn"), groups, c)?,
            });
            c_in = c;
        }
        Ok(Self { blocks })
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.kernel.k_q.dims()[0]).unwrap_or(0)
    }

    /// `(B, L, Hq, Wq, Hs, Ws)` → `(B, c_enc, Hq, Wq)`.
    pub fn forward(&self, hpv: &Tensor) -> Result<Tensor> {
        let mut x = hpv.clone();
        for block in &self.blocks {
            let support = x.dims()[4];
            let stride = Cp4dStride {
                query: 1,
                support: if support > 2 { 2 } else { 1 },
            };
            x = cp4d_conv(&x, &block.kernel, stride)?;
            x = block.norm.forward(&x)?.relu()?;
        }
        Ok(x.mean(5)?.mean(4)?)
    }
}

pub fn encode_4d(encoder: &Encoder4d, hpv: &Hypercorrelation) -> Result<Tensor> {
    encoder.forward(&hpv.volume)
}

#[derive(Debug, Clone)]
pub struct Decoder4d {
    conv1: Conv2d,
    norm: GroupNorm,
    conv2: Conv2d,
}

impl Decoder4d {
    pub fn new(scope: &mut Scope, c_enc: usize, d_p: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut scope.sub("conv1"), c_enc, c_enc, 3, 1)?,
            norm: GroupNorm::new(&mut scope.sub("gn"), groups, c_enc)?,
            conv2: Conv2d::new(&mut scope.sub("conv2"), c_enc, d_p, 3, 1)?,
        })
    }

    pub fn forward(&self, h4d: &Tensor) -> Result<VisualPrompt> {
        let x = self.norm.forward(&self.conv1.forward(h4d)?)?.relu()?;
        VisualPrompt::from_dense(self.conv2.forward(&x)?)
    }
}

pub fn decode_4d(decoder: &Decoder4d, h4d: &Tensor) -> Result<VisualPrompt> {
    decoder.forward(h4d)
}

/// Hypercorrelation → encoder → decoder.
#[derive(Debug, Clone)]
pub struct DenseMatcher {
    cfg: MatchingConfig,
    encoder: Encoder4d,
    decoder: Decoder4d,
}

impl DenseMatcher {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: MatchingConfig,
        levels: usize,
        prompt_dim: usize,
    ) -> Result<Self> {
        let mut root = Scope::new(store, rng, ParamGroup::Matching);
        let mut scope = root.sub("matching");
        let encoder = Encoder4d::new(
            &mut scope.sub("enc"),
            levels,
            &cfg.encoder_channels,
            cfg.kernel,
            cfg.groups,
        )?;
        let decoder = Decoder4d::new(&mut scope.sub("dec"), encoder.out_channels(), prompt_dim, cfg.groups)?;
        Ok(Self { cfg, encoder, decoder })
    }

    pub fn config(&self) -> &MatchingConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder4d {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder4d {
        &self.decoder
    }

    /// Level-wise masked correlation resampled to `hp × hp` and stacked.
    pub fn hypercorrelation(
        &self,
        query: &FeaturePyramid,
        support: &FeaturePyramid,
        support_masks: &[&Mask],
    ) -> Result<Hypercorrelation> {
        if query.len() != support.len() || query.is_empty() {
            return Err(Error::Shape("query and support pyramids differ in depth".into()));
        }
        let hp = self.cfg.hp;
        let mut volumes = Vec::with_capacity(query.len());
        for (fq, fs) in query.levels.iter().zip(&support.levels) {
            let (_, _, hs, _) = fs.dims4()?;
            let mask = if self.cfg.mask_support {
                Some(mask_tensor(support_masks, hs, fs.dtype())?)
            } else {
                None
            };
            let corr = build_hypercorrelation(fq, fs, mask.as_ref())?;
            volumes.push(resample_volume(&corr, hp, hp)?);
        }
        stack_hypercorrelations(&volumes, &query.level_ids)
    }

    pub fn forward(
        &self,
        query: &FeaturePyramid,
        support: &FeaturePyramid,
        support_masks: &[&Mask],
    ) -> Result<VisualPrompt> {
        let hpv = self.hypercorrelation(query, support, support_masks)?;
        self.decoder.forward(&self.encoder.forward(&hpv.volume)?)
    }
}
