use candle_core::{Device, Tensor};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::nn::resize::resize_axis;

pub const COSINE_EPS: f64 = 1e-8;
const NORM_GUARD: f64 = 1e-20;

/// Stacked multi-level 4D correlation, `(B, L, Hp, Wp, Hp, Wp)`; the first
/// spatial pair indexes the query, the second the support.
#[derive(Debug, Clone)]
pub struct Hypercorrelation {
    pub volume: Tensor,
    pub level_meta: Vec<usize>,
}

/// Clamped cosine similarity between every query and every support position.
///
/// `f_q`, `f_s`: `(B, C, H, W)`. Returns `(B, Hq, Wq, Hs, Ws)` with entries in
/// `[0, 1]`. When `support_mask` `(B, Hs, Ws)` is given, support positions with
/// mask 0 are zeroed after the correlation.
pub fn build_hypercorrelation(
    f_q: &Tensor,
    f_s: &Tensor,
    support_mask: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, c, hq, wq) = f_q.dims4()?;
    let (bs, cs, hs, ws) = f_s.dims4()?;
    if c != cs || b != bs {
        return Err(Error::Shape(format!(
            "query features {:?} and support features {:?} disagree",
            f_q.dims(),
            f_s.dims()
        )));
    }
    let q = f_q.reshape((b, c, hq * wq))?.transpose(1, 2)?.contiguous()?;
    let s = f_s.reshape((b, c, hs * ws))?;
    let dot = q.matmul(&s)?;
    // the inner guard keeps the norm differentiable at all-zero feature vectors
    let qn = (q.sqr()?.sum_keepdim(2)? + NORM_GUARD)?.sqrt()?;
    let sn = (s.sqr()?.sum_keepdim(1)? + NORM_GUARD)?.sqrt()?;
    let denom = (qn.matmul(&sn)? + COSINE_EPS)?;
    let mut corr = (dot / denom)?.relu()?;
    if let Some(m) = support_mask {
        let (mb, mh, mw) = m.dims3()?;
        if (mb, mh, mw) != (b, hs, ws) {
            return Err(Error::Shape(format!(
                "support mask {:?} does not match support features {:?}",
                m.dims(),
                f_s.dims()
            )));
        }
        let m = m.reshape((b, 1, hs * ws))?.to_dtype(corr.dtype())?;
        corr = corr.broadcast_mul(&m)?;
    }
    Ok(corr.reshape((b, hq, wq, hs, ws))?)
}

/// Masks nearest-resized to `size × size`, as a `(B, size, size)` tensor.
pub fn mask_tensor(masks: &[&Mask], size: usize, dtype: candle_core::DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(masks.len() * size * size);
    for m in masks {
        let r = if m.height == size && m.width == size {
            (*m).clone()
        } else {
            m.resize_nearest(size, size)
        };
        data.extend(r.data.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (masks.len(), size, size), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Bilinearly resamples both spatial pairs of a `(B, H, W, H', W')` volume.
pub fn resample_volume(volume: &Tensor, hp: usize, wp: usize) -> Result<Tensor> {
    let mut v = volume.clone();
    for (axis, len) in [(1, hp), (2, wp), (3, hp), (4, wp)] {
        v = resize_axis(&v, axis, len)?;
    }
    Ok(v)
}

/// Concatenates per-level volumes (already at a common resolution) along a new
/// level axis, preserving order.
pub fn stack_hypercorrelations(volumes: &[Tensor], level_ids: &[usize]) -> Result<Hypercorrelation> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::InvalidArgument("no correlation volumes to stack".into()))?;
    if volumes.iter().any(|v| v.dims() != first.dims()) {
        return Err(Error::Shape("correlation volumes differ in shape".into()));
    }
    if level_ids.len() != volumes.len() {
        return Err(Error::InvalidArgument("one level id per volume required".into()));
    }
    Ok(Hypercorrelation {
        volume: Tensor::stack(volumes, 1)?,
        level_meta: level_ids.to_vec(),
    })
}
