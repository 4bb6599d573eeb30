//! Vision backbone contract and the reference strided-convolution backbone.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, ParamGroup, ParamStore, Scope};

/// Multi-depth feature maps, each `(B, C_l, H_l, W_l)`, shallowest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub level_ids: Vec<usize>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Rows `start..start + len` of the batch.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            levels: self
                .levels
                .iter()
                .map(|l| l.narrow(0, start, len))
                .collect::<candle_core::Result<_>>()?,
            level_ids: self.level_ids.clone(),
        })
    }
}

/// Decoder-side query features `(B, C_q, H_q, W_q)` plus higher-resolution maps
/// (at 2× and 4× the query resolution) used when upscaling mask embeddings.
#[derive(Debug, Clone)]
pub struct QueryFeatureMap {
    pub features: Tensor,
    pub high_res: Vec<Tensor>,
}

impl QueryFeatureMap {
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            features: self.features.narrow(0, start, len)?,
            high_res: self
                .high_res
                .iter()
                .map(|t| t.narrow(0, start, len))
                .collect::<candle_core::Result<_>>()?,
        })
    }
}

/// Adapter slot for any image encoder producing matching and decoding features.
pub trait VisionBackbone {
    fn num_levels(&self) -> usize;
    fn query_channels(&self) -> usize;
    /// Channel counts of the `high_res` maps, finest last.
    fn high_res_channels(&self) -> Vec<usize>;
    /// `images`: `(B, 3, H, W)`.
    fn extract(&self, images: &Tensor) -> Result<(FeaturePyramid, QueryFeatureMap)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    /// One stage per pyramid level; each halves the resolution.
    pub stage_channels: Vec<usize>,
    /// Which stage feeds the mask decoder.
    pub query_stage: usize,
    pub query_channels: usize,
    pub groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: vec![32, 64, 64],
            query_stage: 1,
            query_channels: 64,
            groups: 4,
        }
    }
}

impl BackboneConfig {
    /// Total downsampling of pyramid level `l`.
    pub fn level_stride(&self, l: usize) -> usize {
        1 << (l + 2)
    }

    pub fn level_sizes(&self, image_size: usize) -> Vec<usize> {
        (0..self.stage_channels.len())
            .map(|l| image_size / self.level_stride(l))
            .collect()
    }

    pub fn query_size(&self, image_size: usize) -> usize {
        image_size / self.level_stride(self.query_stage)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvBlock {
    fn new(scope: &mut Scope, c_in: usize, c_out: usize, stride: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut scope.sub("conv"), c_in, c_out, 3, stride)?,
            norm: GroupNorm::new(&mut scope.sub("gn"), groups, c_out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

/// Stem at stride 2, then stages of (stride-2 block, stride-1 block).
#[derive(Debug, Clone)]
pub struct ConvBackbone {
    cfg: BackboneConfig,
    stem: ConvBlock,
    stages: Vec<(ConvBlock, ConvBlock)>,
    neck: Conv2d,
}

impl ConvBackbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: BackboneConfig) -> Result<Self> {
        if cfg.stage_channels.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if cfg.query_stage >= cfg.stage_channels.len() || cfg.query_stage < 1 {
            return Err(Error::Config("query_stage must name a stage after the first".into()));
        }
        let mut root = Scope::new(store, rng, ParamGroup::Backbone);
        let mut scope = root.sub("backbone");
        let stem = ConvBlock::new(&mut scope.sub("stem"), 3, cfg.stem_channels, 2, cfg.groups)?;
        let mut stages = Vec::new();
        let mut c_in = cfg.stem_channels;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let mut s = scope.sub(&format!("stage{i}"));
            stages.push((
                ConvBlock::new(&mut s.sub("down"), c_in, c, 2, cfg.groups)?,
                ConvBlock::new(&mut s.sub("refine"), c, c, 1, cfg.groups)?,
            ));
            c_in = c;
        }
        let neck = Conv2d::new(
            &mut scope.sub("neck"),
            cfg.stage_channels[cfg.query_stage],
            cfg.query_channels,
            1,
            1,
        )?;
        Ok(Self {
            cfg,
            stem,
            stages,
            neck,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn extract_pyramid(&self, images: &Tensor) -> Result<FeaturePyramid> {
        Ok(self.extract(images)?.0)
    }

    pub fn extract_query_features(&self, images: &Tensor) -> Result<QueryFeatureMap> {
        Ok(self.extract(images)?.1)
    }
}

impl VisionBackbone for ConvBackbone {
    fn num_levels(&self) -> usize {
        self.stages.len()
    }

    fn query_channels(&self) -> usize {
        self.cfg.query_channels
    }

    fn high_res_channels(&self) -> Vec<usize> {
        let q = self.cfg.query_stage;
        let mut out = vec![if q >= 1 { self.cfg.stage_channels[q - 1] } else { self.cfg.stem_channels }];
        out.push(if q >= 2 { self.cfg.stage_channels[q - 2] } else { self.cfg.stem_channels });
        out
    }

    fn extract(&self, images: &Tensor) -> Result<(FeaturePyramid, QueryFeatureMap)> {
        let (_, c, h, w) = images.dims4()?;
        let min = 2 * self.cfg.level_stride(self.stages.len() - 1);
        if c != 3 || h != w || h < min || h % min != 0 {
            return Err(Error::Shape(format!(
                "backbone expects (B, 3, S, S) with S a multiple of {min}, got {:?}",
                images.dims()
            )));
        }
        let stem = self.stem.forward(images)?;
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut x = stem.clone();
        for (down, refine) in &self.stages {
            x = refine.forward(&down.forward(&x)?)?;
            levels.push(x.clone());
        }
        let q = self.cfg.query_stage;
        let features = self.neck.forward(&levels[q])?;
        let finer = |k: usize| if q >= k { levels[q - k].clone() } else { stem.clone() };
        let query = QueryFeatureMap {
            features,
            high_res: vec![finer(1), finer(2)],
        };
        let pyramid = FeaturePyramid {
            level_ids: (1..=levels.len()).collect(),
            levels,
        };
        Ok((pyramid, query))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    fn backbone(seed: u64) -> ConvBackbone {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConvBackbone::new(&mut store, &mut rng, BackboneConfig::default()).unwrap()
    }

    #[test]
    fn pyramid_and_query_shapes_at_default_size() {
        let b = backbone(0);
        let img = Tensor::rand(0f32, 1f32, (2, 3, 128, 128), &Device::Cpu).unwrap();
        let (pyr, q) = b.extract(&img).unwrap();
        let dims: Vec<_> = pyr.levels.iter().map(|l| l.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![2, 32, 32, 32], vec![2, 64, 16, 16], vec![2, 64, 8, 8]]);
        assert_eq!(pyr.level_ids, vec![1, 2, 3]);
        assert_eq!(q.features.dims(), &[2, 64, 16, 16]);
        assert_eq!(q.high_res[0].dims(), &[2, 32, 32, 32]);
        assert_eq!(q.high_res[1].dims(), &[2, 16, 64, 64]);
        assert_eq!(b.high_res_channels(), vec![32, 16]);
        assert_eq!(BackboneConfig::default().level_sizes(128), vec![32, 16, 8]);
    }

    #[test]
    fn zero_image_is_finite_and_extraction_deterministic() {
        let zero = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let (a, _) = backbone(1).extract(&zero).unwrap();
        let (b, _) = backbone(1).extract(&zero).unwrap();
        for (x, y) in a.levels.iter().zip(&b.levels) {
            let x: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
            assert!(x.iter().all(|v| v.is_finite()));
            assert_eq!(x, y.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let b = backbone(0);
        let odd = Tensor::zeros((1, 3, 60, 60), DType::F32, &Device::Cpu).unwrap();
        assert!(b.extract(&odd).is_err());
        let gray = Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(b.extract(&gray).is_err());
        let cfg = BackboneConfig { query_stage: 0, ..BackboneConfig::default() };
        let mut store = ParamStore::new(DType::F32);
        assert!(ConvBackbone::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), cfg).is_err());
    }
}
