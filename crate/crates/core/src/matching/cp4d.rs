//! Center-pivot 4D convolution.
//!
//! A dense 4D kernel over `(query_y, query_x, support_y, support_x)` is replaced
//! by two 2D kernels: one sliding over the query dims with the support offset
//! fixed at the center, one sliding over the support dims with the query offset
//! fixed at the center. The result equals a dense 4D convolution whose kernel is
//! zero outside those two center slabs.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{add_along, conv2d, Init, Scope};

#[derive(Debug, Clone)]
pub struct Cp4dKernel {
    /// `(c_out, c_in, k, k)` over the query dims.
    pub k_q: Tensor,
    /// `(c_out, c_in, k, k)` over the support dims.
    pub k_s: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cp4dStride {
    pub query: usize,
    pub support: usize,
}

impl Cp4dStride {
    pub const UNIT: Cp4dStride = Cp4dStride { query: 1, support: 1 };
}

impl Cp4dKernel {
    pub fn new(scope: &mut Scope, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {k} must be odd")));
        }
        // the two branches sum, so each gets half the usual fan-in variance
        let init = Init::Normal((1.0 / (c_in * k * k) as f64).sqrt());
        Ok(Self {
            k_q: scope.param("k_q", &[c_out, c_in, k, k], init)?,
            k_s: scope.param("k_s", &[c_out, c_in, k, k], init)?,
            bias: Some(scope.param("bias", &[c_out], Init::Zeros)?),
        })
    }

    pub fn kernel_size(&self) -> Result<usize> {
        Ok(self.k_q.dims4()?.3)
    }

    fn validate(&self) -> Result<(usize, usize, usize)> {
        let (o, i, kh, kw) = self.k_q.dims4()?;
        if self.k_s.dims4()? != (o, i, kh, kw) {
            return Err(Error::Shape(format!(
                "query kernel {:?} and support kernel {:?} differ",
                self.k_q.dims(),
                self.k_s.dims()
            )));
        }
        if kh != kw {
            return Err(Error::Shape("kernels must be square".into()));
        }
        if kh % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {kh} must be odd")));
        }
        Ok((o, i, kh))
    }
}

/// Keeps every `stride`-th index (starting at 0) along `axis`.
fn subsample(x: &Tensor, axis: usize, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.clone());
    }
    let n = x.dim(axis)?;
    let idx: Vec<u32> = (0..n).step_by(stride).map(|i| i as u32).collect();
    let idx = Tensor::new(idx.as_slice(), &Device::Cpu)?;
    Ok(x.index_select(&idx, axis)?)
}

/// Output length of a `k`-tap convolution with padding `k / 2`.
pub fn conv_out_len(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

/// `x`: `(B, C, Hq, Wq, Hs, Ws)` → `(B, C_out, Hq', Wq', Hs', Ws')`, zero padding `k / 2`.
pub fn cp4d_conv(x: &Tensor, kernel: &Cp4dKernel, stride: Cp4dStride) -> Result<Tensor> {
    let (c_out, c_in, k) = kernel.validate()?;
    let dims = x.dims();
    if dims.len() != 6 || dims[1] != c_in {
        return Err(Error::Shape(format!(
            "cp4d input must be (B, {c_in}, Hq, Wq, Hs, Ws), got {dims:?}"
        )));
    }
    let (b, hq, wq, hs, ws) = (dims[0], dims[2], dims[3], dims[4], dims[5]);
    let pad = k / 2;
    let (sq, ss) = (stride.query, stride.support);
    let (hq2, wq2) = (conv_out_len(hq, k, sq), conv_out_len(wq, k, sq));
    let (hs2, ws2) = (conv_out_len(hs, k, ss), conv_out_len(ws, k, ss));

    // query branch: support positions act as batch, subsampled to the output grid
    let xq = subsample(&subsample(x, 4, ss)?, 5, ss)?;
    let xq = xq
        .permute((0, 4, 5, 1, 2, 3))?
        .contiguous()?
        .reshape((b * hs2 * ws2, c_in, hq, wq))?;
    let yq = conv2d(&xq, &kernel.k_q, pad, sq)?
        .reshape((b, hs2, ws2, c_out, hq2, wq2))?
        .permute((0, 3, 4, 5, 1, 2))?;

    // support branch: query positions act as batch
    let xs = subsample(&subsample(x, 2, sq)?, 3, sq)?;
    let xs = xs
        .permute((0, 2, 3, 1, 4, 5))?
        .contiguous()?
        .reshape((b * hq2 * wq2, c_in, hs, ws))?;
    let ys = conv2d(&xs, &kernel.k_s, pad, ss)?
        .reshape((b, hq2, wq2, c_out, hs2, ws2))?
        .permute((0, 3, 1, 2, 4, 5))?;

    let y = (yq + ys)?;
    Ok(match &kernel.bias {
        Some(bias) => add_along(&y.contiguous()?, bias, 1)?,
        None => y,
    }
    .contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{dense_cp4d_oracle, random_vec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn flat(x: &Tensor) -> Vec<f64> {
        x.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn centre_tap_identity_kernel_doubles_input() {
        // both branches contribute x once each
        let k = 3;
        let mut w = vec![0.0; k * k];
        w[4] = 1.0;
        let kernel = Cp4dKernel { k_q: t(w.clone(), &[1, 1, k, k]), k_s: t(w, &[1, 1, k, k]), bias: None };
        let x = t(random_vec(&mut ChaCha8Rng::seed_from_u64(1), 3 * 4 * 5 * 2, -1.0, 1.0), &[1, 1, 3, 4, 5, 2]);
        let y = cp4d_conv(&x, &kernel, Cp4dStride::UNIT).unwrap();
        assert_eq!(y.dims(), x.dims());
        for (a, b) in flat(&y).iter().zip(flat(&x)) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kernel = Cp4dKernel {
            k_q: t(random_vec(&mut rng, 2 * 2 * 9, -1.0, 1.0), &[2, 2, 3, 3]),
            k_s: t(random_vec(&mut rng, 2 * 2 * 9, -1.0, 1.0), &[2, 2, 3, 3]),
            bias: None,
        };
        let dims = [1, 2, 4, 4, 4, 4];
        let n = dims.iter().product();
        let a = t(random_vec(&mut rng, n, -1.0, 1.0), &dims);
        let b = t(random_vec(&mut rng, n, -1.0, 1.0), &dims);
        let stride = Cp4dStride { query: 1, support: 2 };
        let lhs = cp4d_conv(&((&a * 2.0).unwrap() - &b).unwrap(), &kernel, stride).unwrap();
        let rhs = ((cp4d_conv(&a, &kernel, stride).unwrap() * 2.0).unwrap()
            - cp4d_conv(&b, &kernel, stride).unwrap())
        .unwrap();
        let d = flat(&(lhs - rhs).unwrap()).into_iter().map(f64::abs).fold(0.0, f64::max);
        assert!(d < 1e-12);
    }

    #[test]
    fn rejects_even_and_mismatched_kernels() {
        let z = |s: &[usize]| Tensor::zeros(s, candle_core::DType::F64, &Device::Cpu).unwrap();
        let x = z(&[1, 1, 3, 3, 3, 3]);
        let even = Cp4dKernel { k_q: z(&[1, 1, 2, 2]), k_s: z(&[1, 1, 2, 2]), bias: None };
        assert!(cp4d_conv(&x, &even, Cp4dStride::UNIT).is_err());
        let mismatch = Cp4dKernel { k_q: z(&[1, 1, 3, 3]), k_s: z(&[2, 1, 3, 3]), bias: None };
        assert!(cp4d_conv(&x, &mismatch, Cp4dStride::UNIT).is_err());
        let ok = Cp4dKernel { k_q: z(&[1, 2, 3, 3]), k_s: z(&[1, 2, 3, 3]), bias: None };
        assert!(cp4d_conv(&x, &ok, Cp4dStride::UNIT).is_err(), "channel mismatch");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn agrees_with_dense_oracle(
            seed in any::<u64>(),
            hq in 1usize..5, wq in 1usize..5, hs in 1usize..5, ws in 1usize..5,
            k in prop::sample::select(vec![1usize, 3]),
            sq in 1usize..3, ss in 1usize..3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c_in, c_out) = (2, 3);
            let dims = [2, c_in, hq, wq, hs, ws];
            let x = random_vec(&mut rng, dims.iter().product(), -1.0, 1.0);
            let kq = random_vec(&mut rng, c_out * c_in * k * k, -1.0, 1.0);
            let ks = random_vec(&mut rng, c_out * c_in * k * k, -1.0, 1.0);
            let bias = random_vec(&mut rng, c_out, -1.0, 1.0);
            let stride = Cp4dStride { query: sq, support: ss };
            let (want, shape) = dense_cp4d_oracle(&x, dims, &kq, &ks, &bias, c_out, k, stride);
            let kernel = Cp4dKernel {
                k_q: t(kq, &[c_out, c_in, k, k]),
                k_s: t(ks, &[c_out, c_in, k, k]),
                bias: Some(t(bias, &[c_out])),
            };
            let y = cp4d_conv(&t(x, &dims), &kernel, stride).unwrap();
            prop_assert_eq!(y.dims(), &shape[..]);
            for (a, b) in flat(&y).iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
