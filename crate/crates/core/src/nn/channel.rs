//! Per-channel broadcast whose backward is a tight per-channel sum. Candle
//! reduces over non-trailing dims element by element with index arithmetic,
//! which dominated training time for biases and norm affines.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{Error, Result};

/// `(outer, channels, inner)` view of the broadcast target.
#[derive(Debug, Clone, Copy)]
struct Span {
    outer: usize,
    channels: usize,
    inner: usize,
}

struct Expand(Span, Shape);
struct SumChannels(Span);

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::RequiresContiguous { op: "channel-broadcast" }),
    }
}

fn expand<T: Copy>(s: Span, v: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(s.outer * s.channels * s.inner);
    for _ in 0..s.outer {
        for &x in v {
            out.extend(std::iter::repeat_n(x, s.inner));
        }
    }
    out
}

fn sum_channels<T: Copy + Default + std::ops::AddAssign>(s: Span, g: &[T]) -> Vec<T> {
    let mut out = vec![T::default(); s.channels];
    for chunk in g.chunks_exact(s.channels * s.inner) {
        for (c, row) in chunk.chunks_exact(s.inner).enumerate() {
            let mut acc = T::default();
            for &x in row {
                acc += x;
            }
            out[c] += acc;
        }
    }
    out
}

impl CustomOp1 for Expand {
    fn name(&self) -> &'static str {
        "expand-channels"
    }

    fn cpu_fwd(&self, st: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match st {
            CpuStorage::F32(v) => CpuStorage::F32(expand(self.0, contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(expand(self.0, contiguous(v, l)?)),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), self.name())),
        };
        Ok((out, self.1.clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(SumChannels(self.0))?))
    }
}

impl CustomOp1 for SumChannels {
    fn name(&self) -> &'static str {
        "sum-channels"
    }

    fn cpu_fwd(&self, st: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match st {
            CpuStorage::F32(v) => CpuStorage::F32(sum_channels(self.0, contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(sum_channels(self.0, contiguous(v, l)?)),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), self.name())),
        };
        Ok((out, Shape::from(self.0.channels)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Expand(self.0, arg.shape().clone()))?))
    }
}

/// Broadcasts the vector `v` of length `dims[axis]` to the full shape `dims`,
/// varying along `axis` only.
pub fn expand_along(v: &Tensor, dims: &[usize], axis: usize) -> Result<Tensor> {
    if axis >= dims.len() || v.dims() != [dims[axis]] {
        return Err(Error::Shape(format!(
            "cannot broadcast {:?} along axis {axis} of {dims:?}",
            v.dims()
        )));
    }
    let span = Span {
        outer: dims[..axis].iter().product(),
        channels: dims[axis],
        inner: dims[axis + 1..].iter().product(),
    };
    Ok(v.contiguous()?.apply_op1(Expand(span, Shape::from(dims)))?)
}

/// `x + v` with `v` indexed along `axis`.
pub fn add_along(x: &Tensor, v: &Tensor, axis: usize) -> Result<Tensor> {
    Ok((x + expand_along(v, x.dims(), axis)?)?)
}

/// `x * v` with `v` indexed along `axis`.
pub fn mul_along(x: &Tensor, v: &Tensor, axis: usize) -> Result<Tensor> {
    Ok((x * expand_along(v, x.dims(), axis)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn matches_broadcast_ops_and_gradients() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0.0f64, 60.0, &dev).unwrap().reshape((2, 3, 2, 5)).unwrap();
        let v = Var::from_tensor(&Tensor::new(&[0.5f64, -1.0, 2.0], &dev).unwrap()).unwrap();
        let ours = mul_along(&x, &v, 1).unwrap();
        let theirs = x.broadcast_mul(&v.reshape((1, 3, 1, 1)).unwrap()).unwrap();
        let diff: f64 = (&ours - &theirs).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert_eq!(diff, 0.0);
        let g1 = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = theirs.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let a: Vec<f64> = g1.get(&v).unwrap().to_vec1().unwrap();
        let b: Vec<f64> = g2.get(&v).unwrap().to_vec1().unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-9 * q.abs().max(1.0));
        }
    }

    #[test]
    fn last_axis_bias() {
        let dev = Device::Cpu;
        let x = Tensor::zeros((4, 3), candle_core::DType::F32, &dev).unwrap();
        let v = Tensor::new(&[1.0f32, 2.0, 3.0], &dev).unwrap();
        let y: Vec<Vec<f32>> = add_along(&x, &v, 1).unwrap().to_vec2().unwrap();
        assert!(y.iter().all(|r| r == &[1.0, 2.0, 3.0]));
        assert!(expand_along(&v, &[4, 2], 1).is_err());
    }
}
