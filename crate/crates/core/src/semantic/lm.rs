use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Init, LayerNorm, Mlp, ParamGroup, ParamStore, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 2,
            heads: 4,
            max_len: 256,
            mlp_ratio: 4,
        }
    }
}

const TOK_EMB: &str = "lm.tok_emb";
const HEAD: &str = "lm.head";

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Per-layer keys and values of everything fed so far, head-split.
#[derive(Debug, Default, Clone)]
pub struct KvCache {
    layers: Vec<Option<(Tensor, Tensor)>>,
    len: usize,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        Self {
            layers: vec![None; layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Small pre-norm causal transformer with learned positions and an untied head.
#[derive(Debug, Clone)]
pub struct TinyLm {
    cfg: LmConfig,
    vocab_size: usize,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Tensor,
}

impl TinyLm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: LmConfig,
        vocab_size: usize,
    ) -> Result<Self> {
        let d = cfg.d_model;
        if d % cfg.heads != 0 {
            return Err(Error::Config(format!("d_model {d} not divisible by {} heads", cfg.heads)));
        }
        let emb_init = Init::Normal(0.02);
        let tok_emb = store.create(TOK_EMB, &[vocab_size, d], emb_init, ParamGroup::LmEmbed, rng)?;
        let pos_emb = store.create("lm.pos_emb", &[cfg.max_len, d], emb_init, ParamGroup::LmEmbed, rng)?;
        let head = store.create(HEAD, &[vocab_size, d], emb_init, ParamGroup::LmHead, rng)?;
        let mut scope = Scope::new(store, rng, ParamGroup::LmBody);
        let mut scope = scope.sub("lm");
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let mut s = scope.sub(&format!("block{i}"));
            blocks.push(Block {
                ln1: LayerNorm::new(&mut s.sub("ln1"), d)?,
                attn: Attention::new(&mut s.sub("attn"), d, d, cfg.heads)?,
                ln2: LayerNorm::new(&mut s.sub("ln2"), d)?,
                mlp: Mlp::new(&mut s.sub("mlp"), &[d, d * cfg.mlp_ratio, d])?,
            });
        }
        let ln_f = LayerNorm::new(&mut scope.sub("ln_f"), d)?;
        Ok(Self {
            cfg,
            vocab_size,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn token_embeddings(&self) -> &Tensor {
        &self.tok_emb
    }

    pub fn head_weights(&self) -> &Tensor {
        &self.head
    }

    /// Appends one row to both the embedding table and the output head. The new
    /// rows are the mean of the existing rows plus N(0, 0.02²) noise; existing
    /// rows are copied unchanged. Returns the new token id.
    pub fn add_token(&mut self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<u32> {
        let new_id = self.vocab_size as u32;
        self.tok_emb = append_row(store, TOK_EMB, &self.tok_emb, ParamGroup::LmEmbed, rng)?;
        self.head = append_row(store, HEAD, &self.head, ParamGroup::LmHead, rng)?;
        self.vocab_size += 1;
        Ok(new_id)
    }

    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        let idx = Tensor::new(ids, &Device::Cpu)?;
        Ok(self.tok_emb.embedding(&idx)?)
    }

    /// Runs `embeds` `(T, d)` through the stack, continuing from whatever the
    /// cache already holds. Returns post-final-norm hidden states `(T, d)`.
    pub fn forward(&self, embeds: &Tensor, cache: &mut KvCache) -> Result<Tensor> {
        let (t, d) = embeds.dims2()?;
        let start = cache.len;
        if start + t > self.cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_len {}",
                start + t,
                self.cfg.max_len
            )));
        }
        if cache.layers.len() != self.blocks.len() {
            *cache = KvCache::new(self.blocks.len());
        }
        let pos = self.pos_emb.narrow(0, start, t)?;
        let mut h = (embeds + pos)?.reshape((1, t, d))?;
        let mask = if t > 1 {
            Some(causal_mask(t, start, embeds.dtype())?)
        } else {
            None
        };
        for (block, slot) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            let x = block.ln1.forward(&h)?;
            let (k_new, v_new) = block.attn.project_kv(&x, &x)?;
            let (k, v) = match slot.take() {
                Some((k_old, v_old)) => (
                    Tensor::cat(&[&k_old, &k_new], 2)?,
                    Tensor::cat(&[&v_old, &v_new], 2)?,
                ),
                None => (k_new, v_new),
            };
            let a = block.attn.forward_projected(&x, &k, &v, mask.as_ref())?;
            *slot = Some((k, v));
            h = (h + a)?;
            let m = block.mlp.forward(&block.ln2.forward(&h)?)?;
            h = (h + m)?;
        }
        cache.len += t;
        Ok(self.ln_f.forward(&h)?.reshape((t, d))?)
    }

    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        Ok(hidden.broadcast_matmul(&self.head.t()?)?)
    }
}

/// Additive mask `(T, start + T)`: query `i` may attend to keys `0..=start + i`.
fn causal_mask(t: usize, start: usize, dtype: DType) -> Result<Tensor> {
    let total = start + t;
    let mut m = vec![0f32; t * total];
    for i in 0..t {
        for j in (start + i + 1)..total {
            m[i * total + j] = -1e9;
        }
    }
    Ok(Tensor::from_vec(m, (t, total), &Device::Cpu)?.to_dtype(dtype)?)
}

fn append_row(
    store: &mut ParamStore,
    name: &str,
    table: &Tensor,
    group: ParamGroup,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (_, d) = table.dims2()?;
    let mean = table.detach().to_dtype(DType::F64)?.mean(0)?.to_vec1::<f64>()?;
    let noise = Normal::new(0.0, 0.02).expect("valid std");
    let row: Vec<f64> = mean.iter().map(|m| m + noise.sample(rng)).collect();
    let row = Tensor::from_vec(row, (1, d), &Device::Cpu)?.to_dtype(table.dtype())?;
    let grown = Tensor::cat(&[&table.detach(), &row], 0)?;
    store.insert(name, grown, group)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn lm(store: &mut ParamStore, vocab: usize) -> TinyLm {
        let cfg = LmConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            max_len: 32,
            mlp_ratio: 2,
        };
        TinyLm::new(store, &mut ChaCha8Rng::seed_from_u64(0), cfg, vocab).unwrap()
    }

    #[test]
    fn adding_a_token_grows_tables_and_keeps_old_rows() {
        let mut store = ParamStore::new(DType::F64);
        let mut m = lm(&mut store, 1000);
        let before_emb = m.token_embeddings().to_vec2::<f64>().unwrap();
        let before_head = m.head_weights().to_vec2::<f64>().unwrap();
        let id = m.add_token(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(id, 1000);
        let emb = m.token_embeddings().to_vec2::<f64>().unwrap();
        let head = m.head_weights().to_vec2::<f64>().unwrap();
        assert_eq!(emb.len(), 1001);
        assert_eq!(head.len(), 1001);
        assert_eq!(&emb[..1000], &before_emb[..]);
        assert_eq!(&head[..1000], &before_head[..]);
        assert_eq!(store.get(TOK_EMB).unwrap().dims(), &[1001, 16]);
    }

    #[test]
    fn cached_decoding_matches_full_pass() {
        let mut store = ParamStore::new(DType::F64);
        let m = lm(&mut store, 50);
        let ids = [3u32, 7, 1, 9, 4, 4, 2];
        let emb = m.embed_tokens(&ids).unwrap();
        let full = m.forward(&emb, &mut KvCache::new(2)).unwrap();
        let mut cache = KvCache::new(2);
        let mut parts = vec![m.forward(&emb.narrow(0, 0, 4).unwrap(), &mut cache).unwrap()];
        for i in 4..7 {
            parts.push(m.forward(&emb.narrow(0, i, 1).unwrap(), &mut cache).unwrap());
        }
        let inc = Tensor::cat(&parts, 0).unwrap();
        let diff = (full - inc).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn future_tokens_do_not_leak() {
        let mut store = ParamStore::new(DType::F64);
        let m = lm(&mut store, 50);
        let a = m.forward(&m.embed_tokens(&[1, 2, 3, 4]).unwrap(), &mut KvCache::new(2)).unwrap();
        let b = m.forward(&m.embed_tokens(&[1, 2, 3, 9]).unwrap(), &mut KvCache::new(2)).unwrap();
        let a = a.narrow(0, 0, 3).unwrap().to_vec2::<f64>().unwrap();
        let b = b.narrow(0, 0, 3).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a, b);
    }
}
