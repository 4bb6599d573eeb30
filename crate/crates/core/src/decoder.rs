//! Prompt-conditioned mask decoder: a mask query and the two prompt tokens
//! exchange information with the dense query stream through two-way attention,
//! then the updated mask query is dotted with upscaled dense embeddings.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::matching::VisualPrompt;
use crate::nn::{resize, Attention, Conv2d, GroupNorm, Init, LayerNorm, Linear, Mlp, ParamGroup, ParamStore, Scope};
use crate::semantic::SemanticPrompt;
use crate::vision::QueryFeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub groups: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            groups: 4,
        }
    }
}

/// `(B, H, W)` logits at the query image resolution.
#[derive(Debug, Clone)]
pub struct MaskLogits {
    pub logits: Tensor,
}

impl MaskLogits {
    pub fn to_masks(&self, threshold: f64) -> Result<Vec<Mask>> {
        binarize(self, threshold)
    }
}

/// `logits > threshold`, per batch element.
pub fn binarize(logits: &MaskLogits, threshold: f64) -> Result<Vec<Mask>> {
    let (b, h, w) = logits.logits.dims3()?;
    let values = logits.logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b)
        .map(|i| binarize_values(&values[i * h * w..(i + 1) * h * w], h, w, threshold))
        .collect())
}

pub fn binarize_values(values: &[f64], height: usize, width: usize, threshold: f64) -> Mask {
    let mut mask = Mask::new(height, width);
    for (m, &v) in mask.data.iter_mut().zip(values) {
        *m = u8::from(v > threshold);
    }
    mask
}

/// Fixed 2D sinusoidal position code, `(1, H·W, d)`: half the channels encode
/// the row, half the column.
pub fn position_encoding(h: usize, w: usize, d: usize, dtype: DType) -> Result<Tensor> {
    let quarter = d / 4;
    let mut data = vec![0f64; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            for (offset, pos) in [(0, y as f64), (d / 2, x as f64)] {
                for i in 0..quarter {
                    let freq = 1.0 / 100f64.powf(i as f64 / quarter as f64);
                    row[offset + 2 * i] = (pos * freq).sin();
                    row[offset + 2 * i + 1] = (pos * freq).cos();
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (1, h * w, d), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_t2i: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_i2t: Attention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn new(scope: &mut Scope, d: usize, heads: usize, mlp_dim: usize, skip_first_pe: bool) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(&mut scope.sub("self_attn"), d, d, heads)?,
            norm1: LayerNorm::new(&mut scope.sub("norm1"), d)?,
            cross_t2i: Attention::new(&mut scope.sub("cross_t2i"), d, d / 2, heads)?,
            norm2: LayerNorm::new(&mut scope.sub("norm2"), d)?,
            mlp: Mlp::new(&mut scope.sub("mlp"), &[d, mlp_dim, d])?,
            norm3: LayerNorm::new(&mut scope.sub("norm3"), d)?,
            cross_i2t: Attention::new(&mut scope.sub("cross_i2t"), d, d / 2, heads)?,
            norm4: LayerNorm::new(&mut scope.sub("norm4"), d)?,
            skip_first_pe,
        })
    }

    fn forward(&self, tokens: &Tensor, image: &Tensor, token_pe: &Tensor, image_pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = if self.skip_first_pe {
            tokens.clone()
        } else {
            (tokens + token_pe)?
        };
        let t = self.norm1.forward(&(tokens + self.self_attn.forward(&q, &q, tokens)?)?)?;

        let q = (&t + token_pe)?;
        let k = image.broadcast_add(image_pe)?;
        let t = self.norm2.forward(&(&t + self.cross_t2i.forward(&q, &k, image)?)?)?;

        let t = self.norm3.forward(&(&t + self.mlp.forward(&t)?)?)?;

        let q = (&t + token_pe)?;
        let img = self.norm4.forward(&(image + self.cross_i2t.forward(&k, &q, &t)?)?)?;
        Ok((t, img))
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    conv: Conv2d,
    skip: Conv2d,
    norm: GroupNorm,
}

impl UpBlock {
    fn new(scope: &mut Scope, c_in: usize, c_out: usize, c_skip: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut scope.sub("conv"), c_in, c_out, 3, 1)?,
            skip: Conv2d::new(&mut scope.sub("skip"), c_skip, c_out, 1, 1)?,
            norm: GroupNorm::new(&mut scope.sub("gn"), groups, c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let up = resize::resize_2d(x, 2 * h, 2 * w)?;
        let (_, _, sh, sw) = skip.dims4()?;
        if (sh, sw) != (2 * h, 2 * w) {
            return Err(Error::Shape(format!(
                "skip feature {:?} does not match upscaled size {}x{}",
                skip.dims(),
                2 * h,
                2 * w
            )));
        }
        let y = (self.conv.forward(&up)? + self.skip.forward(skip)?)?;
        Ok(self.norm.forward(&y)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    dim: usize,
    mask_token: Tensor,
    null_sem: Tensor,
    null_vis_token: Tensor,
    null_vis_dense: Tensor,
    vis_token_proj: Linear,
    vis_dense_proj: Conv2d,
    q_proj: Conv2d,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    final_norm: LayerNorm,
    up1: UpBlock,
    up2: UpBlock,
    hyper: Mlp,
}

impl MaskDecoder {
    /// `high_res_channels`: channels of the maps at 2× and 4× the query resolution.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: DecoderConfig,
        dim: usize,
        query_channels: usize,
        high_res_channels: [usize; 2],
    ) -> Result<Self> {
        if dim % 4 != 0 || (dim / 2) % cfg.heads != 0 {
            return Err(Error::Config(format!("decoder width {dim} incompatible with {} heads", cfg.heads)));
        }
        if (dim / 4) % cfg.groups != 0 {
            return Err(Error::Config(format!("decoder width {dim} incompatible with {} groups", cfg.groups)));
        }
        let mut root = Scope::new(store, rng, ParamGroup::Decoder);
        let mut s = root.sub("decoder");
        let token = Init::Normal(1.0);
        let mask_token = s.param("mask_token", &[1, 1, dim], token)?;
        let null_sem = s.param("null_sem", &[1, 1, dim], token)?;
        let null_vis_token = s.param("null_vis_token", &[1, 1, dim], token)?;
        let null_vis_dense = s.param("null_vis_dense", &[1, dim, 1, 1], Init::Normal(0.02))?;
        let vis_token_proj = Linear::new(&mut s.sub("vis_token_proj"), dim, dim, Init::xavier(dim, dim))?;
        let vis_dense_proj = Conv2d::new(&mut s.sub("vis_dense_proj"), dim, dim, 1, 1)?;
        let q_proj = Conv2d::new(&mut s.sub("q_proj"), query_channels, dim, 1, 1)?;
        let blocks = (0..cfg.depth)
            .map(|i| TwoWayBlock::new(&mut s.sub(&format!("block{i}")), dim, cfg.heads, dim * cfg.mlp_ratio, i == 0))
            .collect::<Result<Vec<_>>>()?;
        let final_attn = Attention::new(&mut s.sub("final_attn"), dim, dim / 2, cfg.heads)?;
        let final_norm = LayerNorm::new(&mut s.sub("final_norm"), dim)?;
        let up1 = UpBlock::new(&mut s.sub("up1"), dim, dim / 2, high_res_channels[0], cfg.groups)?;
        let up2 = UpBlock::new(&mut s.sub("up2"), dim / 2, dim / 4, high_res_channels[1], cfg.groups)?;
        let hyper = Mlp::new(&mut s.sub("hyper"), &[dim, dim, dim / 4])?;
        Ok(Self {
            dim,
            mask_token,
            null_sem,
            null_vis_token,
            null_vis_dense,
            vis_token_proj,
            vis_dense_proj,
            q_proj,
            blocks,
            final_attn,
            final_norm,
            up1,
            up2,
            hyper,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mask logits at `out_size × out_size`. Absent prompts are replaced by
    /// learned null embeddings.
    pub fn forward(
        &self,
        q_feat: &QueryFeatureMap,
        vis: Option<&VisualPrompt>,
        sem: Option<&SemanticPrompt>,
        out_size: usize,
    ) -> Result<MaskLogits> {
        let (b, _, hq, wq) = q_feat.features.dims4()?;
        let d = self.dim;
        if q_feat.high_res.len() < 2 {
            return Err(Error::Shape("decoder needs two high-resolution skip maps".into()));
        }

        let sem_token = match sem {
            Some(s) => {
                check_prompt("semantic prompt", &s.embedding, b, d)?;
                s.embedding.reshape((b, 1, d))?
            }
            None => self.null_sem.broadcast_as((b, 1, d))?,
        };
        let (vis_token, vis_dense) = match vis {
            Some(v) => {
                check_prompt("visual prompt", &v.pooled, b, d)?;
                let token = self.vis_token_proj.forward(&v.pooled)?.reshape((b, 1, d))?;
                let (_, _, vh, vw) = v.dense_map.dims4()?;
                let dense = if (vh, vw) == (hq, wq) {
                    v.dense_map.clone()
                } else {
                    resize::resize_2d(&v.dense_map, hq, wq)?
                };
                (token, self.vis_dense_proj.forward(&dense)?)
            }
            None => (
                self.null_vis_token.broadcast_as((b, 1, d))?,
                self.null_vis_dense.broadcast_as((b, d, hq, wq))?,
            ),
        };
        let tokens = Tensor::cat(
            &[&self.mask_token.broadcast_as((b, 1, d))?, &sem_token, &vis_token],
            1,
        )?;

        let dense = (self.q_proj.forward(&q_feat.features)? + vis_dense)?;
        let mut image = dense.reshape((b, d, hq * wq))?.transpose(1, 2)?.contiguous()?;
        let pe = position_encoding(hq, wq, d, dense.dtype())?;

        let token_pe = tokens.clone();
        let mut t = tokens;
        for block in &self.blocks {
            (t, image) = block.forward(&t, &image, &token_pe, &pe)?;
        }
        let q = (&t + &token_pe)?;
        let k = image.broadcast_add(&pe)?;
        let t = self.final_norm.forward(&(&t + self.final_attn.forward(&q, &k, &image)?)?)?;

        let grid = image.transpose(1, 2)?.reshape((b, d, hq, wq))?;
        let x = self.up1.forward(&grid, &q_feat.high_res[0])?;
        let x = self.up2.forward(&x, &q_feat.high_res[1])?;
        let (_, c, h4, w4) = x.dims4()?;
        let hyper = self.hyper.forward(&t.narrow(1, 0, 1)?)?;
        let logits = hyper.matmul(&x.reshape((b, c, h4 * w4))?)?.reshape((b, h4, w4))?;
        let logits = if (h4, w4) == (out_size, out_size) {
            logits
        } else {
            resize::resize_2d(&logits.unsqueeze(1)?, out_size, out_size)?.squeeze(1)?
        };
        Ok(MaskLogits { logits })
    }
}

pub fn decode_mask(
    decoder: &MaskDecoder,
    q_feat: &QueryFeatureMap,
    vis: Option<&VisualPrompt>,
    sem: Option<&SemanticPrompt>,
    out_size: usize,
) -> Result<MaskLogits> {
    decoder.forward(q_feat, vis, sem, out_size)
}

fn check_prompt(what: &str, t: &Tensor, b: usize, d: usize) -> Result<()> {
    if t.dims() != [b, d] {
        return Err(Error::Shape(format!("{what} has shape {:?}, expected [{b}, {d}]", t.dims())));
    }
    let sum = t.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !sum.is_finite() {
        return Err(Error::NonFinite(format!("{what} contains non-finite values")));
    }
    Ok(())
}
