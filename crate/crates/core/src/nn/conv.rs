//! 2D convolution as im2col + matmul. The patch gather and its adjoint
//! scatter are custom ops that serve as each other's backward pass, so the
//! gradient costs one gather/scatter plus two matmuls.

use std::ops::AddAssign;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn cols_shape(&self) -> Shape {
        Shape::from((self.b, self.c * self.k * self.k, self.ho * self.wo))
    }

    fn image_shape(&self) -> Shape {
        Shape::from((self.b, self.c, self.h, self.w))
    }

    /// Calls `f(image_offset, col_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, l) = (self.k, self.ho * self.wo);
        for bc in 0..self.b * self.c {
            let img = bc * self.h * self.w;
            for i in 0..k {
                for j in 0..k {
                    let col = (bc * k * k + i * k + j) * l;
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let row = img + y as usize * self.w;
                        for ox in 0..self.wo {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            if x >= 0 && x < self.w as isize {
                                f(row + x as usize, col + oy * self.wo + ox);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn gather<T: Copy + Default>(g: &Geom, src: &[T]) -> Vec<T> {
    let mut out = vec![T::default(); g.cols_shape().elem_count()];
    g.for_each_tap(|i, c| out[c] = src[i]);
    out
}

fn scatter<T: Copy + Default + AddAssign>(g: &Geom, src: &[T]) -> Vec<T> {
    let mut out = vec![T::default(); g.image_shape().elem_count()];
    g.for_each_tap(|i, c| out[i] += src[c]);
    out
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::RequiresContiguous { op: "im2col" }),
    }
}

struct Im2Col(Geom);
struct Col2Im(Geom);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(gather(&self.0, contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(&self.0, contiguous(v, l)?)),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "im2col"));
            }
        };
        Ok((out, self.0.cols_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(&self.0, contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(&self.0, contiguous(v, l)?)),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "col2im"));
            }
        };
        Ok((out, self.0.image_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2D cross-correlation `(B, C, H, W) * (O, C, k, k) -> (B, O, H', W')` with
/// zero padding on both sides.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, c_w, kh, kw) = w.dims4()?;
    if c != c_w || kh != kw {
        return Err(Error::Shape(format!(
            "conv2d: input {:?} incompatible with kernel {:?}",
            x.dims(),
            w.dims()
        )));
    }
    if stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "conv2d: kernel {kh} with padding {padding} does not fit {h}x{wd}"
        )));
    }
    let g = Geom {
        b,
        c,
        h,
        w: wd,
        k: kh,
        pad: padding,
        stride,
        ho: (h + 2 * padding - kh) / stride + 1,
        wo: (wd + 2 * padding - kw) / stride + 1,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let wm = w.reshape((1, o, c * kh * kw))?;
    Ok(wm.broadcast_matmul(&cols)?.reshape((b, o, g.ho, g.wo))?)
}
