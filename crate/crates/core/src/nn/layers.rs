use candle_core::{DType, Tensor, D};
use rand_chacha::ChaCha8Rng;

use super::channel::{add_along, mul_along};
use super::conv::conv2d;
use super::params::{Init, ParamGroup, ParamStore};
use crate::error::Result;

/// Hands out named parameters under a common prefix and group.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            group,
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
            group: self.group,
        }
    }

    pub fn with_group(&mut self, name: &str, group: ParamGroup) -> Scope<'_> {
        let mut s = self.sub(name);
        s.group = group;
        s
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(&full, shape, init, self.group, self.rng)
    }

    pub fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn store(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(scope: &mut Scope, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        let weight = scope.param("weight", &[out_dim, in_dim], init)?;
        let bias = Some(scope.param("bias", &[out_dim], Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    pub fn no_bias(scope: &mut Scope, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        let weight = scope.param("weight", &[out_dim, in_dim], init)?;
        Ok(Self { weight, bias: None })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // flatten leading dims so the weight gradient is one matmul
        let mut dims = x.dims().to_vec();
        let d_in = dims.pop().unwrap_or(1);
        let rows: usize = dims.iter().product();
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => add_along(&y, b, 1)?,
            None => y,
        };
        dims.push(y.dim(1)?);
        Ok(y.reshape(dims.as_slice())?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = scope.param("weight", &[c_out, c_in, kernel, kernel], Init::he(fan_in))?;
        let bias = Some(scope.param("bias", &[c_out], Init::Zeros)?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.padding, self.stride)?;
        Ok(match &self.bias {
            Some(b) => add_along(&y, b, 1)?,
            None => y,
        })
    }
}

/// Group normalization over a `(B, C, ...)` tensor with any number of trailing dims.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(scope: &mut Scope, groups: usize, channels: usize) -> Result<Self> {
        assert!(channels % groups == 0, "channels must divide into groups");
        Ok(Self {
            gamma: scope.param("gamma", &[channels], Init::Ones)?,
            beta: scope.param("beta", &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let b = dims[0];
        let g = x.reshape((b, self.groups, ()))?;
        let mean = g.mean_keepdim(2)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape(dims.as_slice())?;
        Ok(add_along(&mul_along(&normed, &self.gamma, 1)?, &self.beta, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("gamma", &[dim], Init::Ones)?,
            beta: scope.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let last = normed.rank() - 1;
        Ok(add_along(&mul_along(&normed, &self.gamma, last)?, &self.beta, last)?)
    }
}

/// Softmax over the last dim; the max shift is detached since it cancels analytically.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Multi-head attention over `(B, N, d)` token tensors.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    inner: usize,
}

impl Attention {
    pub fn new(scope: &mut Scope, dim: usize, inner: usize, heads: usize) -> Result<Self> {
        assert!(inner % heads == 0, "inner dim must divide into heads");
        let init = Init::xavier(dim, inner);
        Ok(Self {
            q: Linear::new(&mut scope.sub("q"), dim, inner, init)?,
            k: Linear::new(&mut scope.sub("k"), dim, inner, init)?,
            v: Linear::new(&mut scope.sub("v"), dim, inner, init)?,
            out: Linear::new(&mut scope.sub("out"), inner, dim, Init::xavier(inner, dim))?,
            heads,
            inner,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, self.inner / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn merge_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, n, _) = x.dims4()?;
        Ok(x.transpose(1, 2)?.reshape((b, n, self.inner))?)
    }

    pub fn project_kv(&self, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            self.split_heads(&self.k.forward(k)?)?,
            self.split_heads(&self.v.forward(v)?)?,
        ))
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (kh, vh) = self.project_kv(k, v)?;
        self.forward_projected(q, &kh, &vh, None)
    }

    /// Attention with already head-split keys and values, e.g. from a decoding cache.
    /// `mask` is additive, broadcast to `(B, heads, Nq, Nk)`.
    pub fn forward_projected(
        &self,
        q: &Tensor,
        kh: &Tensor,
        vh: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let qh = self.split_heads(&self.q.forward(q)?)?;
        let scale = 1.0 / ((self.inner / self.heads) as f64).sqrt();
        let mut scores = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = softmax_last(&scores)?;
        let ctx = attn.matmul(vh)?;
        self.out.forward(&self.merge_heads(&ctx)?)
    }
}

/// Plain MLP with ReLU between layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(scope: &mut Scope, dims: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let last = i + 2 == dims.len();
            let init = if last {
                Init::xavier(w[0], w[1])
            } else {
                Init::he(w[0])
            };
            layers.push(Linear::new(&mut scope.sub(&format!("l{i}")), w[0], w[1], init)?);
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Logistic sigmoid as `exp(-softplus(-x))`, which keeps gradients finite at
/// saturated inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?.exp()?)
}
