use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Row-major `(out_len, in_len)` bilinear interpolation weights using half-pixel
/// centers with edge clamping. Downsampling by an exact factor of two reduces to
/// pair averaging.
pub fn bilinear_weights(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut w = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        w[o * in_len + i0] += 1.0 - frac;
        w[o * in_len + i1] += frac;
    }
    w
}

pub fn bilinear_matrix(in_len: usize, out_len: usize, dtype: DType) -> Result<Tensor> {
    let w = bilinear_weights(in_len, out_len);
    Ok(Tensor::from_vec(w, (out_len, in_len), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Bilinear resampling along a single axis, differentiable w.r.t. `x`.
pub fn resize_axis(x: &Tensor, axis: usize, out_len: usize) -> Result<Tensor> {
    let in_len = x.dim(axis)?;
    if in_len == out_len {
        return Ok(x.clone());
    }
    let m = bilinear_matrix(in_len, out_len, x.dtype())?;
    let rank = x.rank();
    let moved = if axis + 1 == rank {
        x.clone()
    } else {
        x.transpose(axis, rank - 1)?
    };
    let mut lead: Vec<usize> = moved.dims().to_vec();
    lead.pop();
    let rows: usize = lead.iter().product();
    let flat = moved.contiguous()?.reshape((rows, in_len))?;
    let out = flat.matmul(&m.t()?)?;
    lead.push(out_len);
    let out = out.reshape(lead.as_slice())?;
    Ok(if axis + 1 == rank {
        out
    } else {
        out.transpose(axis, rank - 1)?.contiguous()?
    })
}

/// Resizes the last two dims of `x` to `(out_h, out_w)`.
pub fn resize_2d(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let r = x.rank();
    let y = resize_axis(x, r - 1, out_w)?;
    resize_axis(&y, r - 2, out_h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_is_pair_average() {
        let w = bilinear_weights(4, 2);
        assert_eq!(w, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn rows_sum_to_one() {
        for (i, o) in [(8, 16), (16, 8), (5, 7), (32, 16), (3, 3)] {
            let w = bilinear_weights(i, o);
            for r in 0..o {
                let s: f64 = w[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_field_is_preserved() -> Result<()> {
        let x = Tensor::full(3.5f64, (2, 6, 6), &Device::Cpu)?;
        let y = resize_2d(&x, 11, 4)?;
        assert_eq!(y.dims(), &[2, 11, 4]);
        for v in y.flatten_all()?.to_vec1::<f64>()? {
            assert!((v - 3.5).abs() < 1e-12);
        }
        Ok(())
    }
}
