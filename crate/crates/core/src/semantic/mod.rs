//! Class semantic encoder: a language model with an added `<SEM_prompt>` token
//! reads the query image and the class prompt; the last-layer state at that
//! token is projected into the mask decoder's prompt space.

pub mod lm;
pub mod tokenizer;

use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::prompt::PromptSequence;
use crate::error::{Error, Result};
use crate::nn::{resize, Conv2d, Linear, Init, Mlp, ParamGroup, ParamStore, Scope};
use lm::{KvCache, LmConfig, TinyLm};
use tokenizer::{ExtendedTokenizer, Vocab};

pub const MAX_NEW_TOKENS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    /// Score the known answer suffix in a single pass.
    TeacherForced,
    /// Greedy decoding of at most `MAX_NEW_TOKENS`, stopping after `<SEM_prompt>` or `</s>`.
    Free,
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub text_tokens: Vec<u32>,
    /// `(T, d_lm)`: row `i` is the last-layer state where `text_tokens[i]` is the input.
    pub hidden_states: Tensor,
    /// `(T, V)` in teacher-forced mode: row `i` is the prediction of `text_tokens[i]`.
    pub logits: Option<Tensor>,
    pub sem_positions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SemanticPrompt {
    /// `(B, d_p)`
    pub embedding: Tensor,
}

/// Contract for swapping in an external multimodal language model.
pub trait LanguageModelAdapter {
    fn hidden_width(&self) -> usize;
    fn tokenizer(&self) -> &ExtendedTokenizer;
    /// `image_features` is an `(n, d_lm)` sequence that replaces the prompt's image slot.
    fn generate(
        &self,
        prompt: &PromptSequence,
        image_features: &Tensor,
        mode: GenerationMode,
    ) -> Result<GenerationOutput>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageAdapterConfig {
    /// Input is average-resampled to this square size first.
    pub input_size: usize,
    pub grid: usize,
    pub channels: usize,
}

impl Default for ImageAdapterConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            grid: 4,
            channels: 64,
        }
    }
}

/// Turns an image batch into a short sequence of language-model input vectors.
#[derive(Debug, Clone)]
pub struct LmImageEncoder {
    cfg: ImageAdapterConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Linear,
}

impl LmImageEncoder {
    pub fn new(scope: &mut Scope, cfg: ImageAdapterConfig, d_lm: usize) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            cfg,
            conv1: Conv2d::new(&mut scope.sub("conv1"), 3, c / 2, 3, 2)?,
            conv2: Conv2d::new(&mut scope.sub("conv2"), c / 2, c, 3, 2)?,
            proj: Linear::new(&mut scope.sub("proj"), c, d_lm, Init::xavier(c, d_lm))?,
        })
    }

    /// `(B, 3, H, W)` → `(B, grid², d_lm)`
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let s = self.cfg.input_size;
        let x = resize::resize_2d(images, s, s)?;
        let x = self.conv1.forward(&x)?.relu()?;
        let x = self.conv2.forward(&x)?.relu()?;
        let g = self.cfg.grid;
        let x = resize::resize_2d(&x, g, g)?;
        let (b, c, _, _) = x.dims4()?;
        let tokens = x.reshape((b, c, g * g))?.transpose(1, 2)?;
        self.proj.forward(&tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemanticConfig {
    pub lm: LmConfig,
    pub image: ImageAdapterConfig,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            image: ImageAdapterConfig::default(),
        }
    }
}

/// Adds `<SEM_prompt>` to the vocabulary and grows the model's tables to match.
pub fn extend_vocab(
    base: Vocab,
    lm: &mut TinyLm,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<ExtendedTokenizer> {
    if lm.vocab_size() != base.len() {
        return Err(Error::Shape(format!(
            "model vocabulary {} does not match tokenizer {}",
            lm.vocab_size(),
            base.len()
        )));
    }
    let tokenizer = ExtendedTokenizer::extend(base)?;
    let id = lm.add_token(store, rng)?;
    debug_assert_eq!(id, tokenizer.sem_token_id());
    Ok(tokenizer)
}

#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    tokenizer: ExtendedTokenizer,
    lm: TinyLm,
    image_adapter: LmImageEncoder,
    proj: Mlp,
}

impl SemanticEncoder {
    /// Builds the language model over `base` and extends it with `<SEM_prompt>`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: SemanticConfig,
        base: Vocab,
        prompt_dim: usize,
    ) -> Result<Self> {
        let mut lm = TinyLm::new(store, rng, cfg.lm, base.len())?;
        let d = cfg.lm.d_model;
        let image_adapter = LmImageEncoder::new(
            &mut Scope::new(store, rng, ParamGroup::LmImage).sub("lm_image"),
            cfg.image,
            d,
        )?;
        let proj = Mlp::new(
            &mut Scope::new(store, rng, ParamGroup::SemProj).sub("sem_proj"),
            &[d, d, prompt_dim],
        )?;
        let tokenizer = extend_vocab(base, &mut lm, store, rng)?;
        Ok(Self {
            tokenizer,
            lm,
            image_adapter,
            proj,
        })
    }

    pub fn lm(&self) -> &TinyLm {
        &self.lm
    }

    pub fn projection(&self) -> &Mlp {
        &self.proj
    }

    pub fn image_tokens(&self, images: &Tensor) -> Result<Tensor> {
        self.image_adapter.forward(images)
    }

    fn prompt_embeddings(&self, prompt: &PromptSequence, image_features: &Tensor) -> Result<Tensor> {
        let slot = prompt.image_slot;
        if prompt.tokens.get(slot) != Some(&self.tokenizer.image_token_id()) {
            return Err(Error::MissingImageSlot);
        }
        let (_, d) = image_features.dims2()?;
        if d != self.lm.d_model() {
            return Err(Error::Shape(format!(
                "image features have width {d}, model expects {}",
                self.lm.d_model()
            )));
        }
        let mut parts = Vec::with_capacity(3);
        if slot > 0 {
            parts.push(self.lm.embed_tokens(&prompt.tokens[..slot])?);
        }
        parts.push(image_features.clone());
        if slot + 1 < prompt.tokens.len() {
            parts.push(self.lm.embed_tokens(&prompt.tokens[slot + 1..])?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    pub fn generate_semantic(
        &self,
        prompt: &PromptSequence,
        image_features: &Tensor,
        mode: GenerationMode,
    ) -> Result<GenerationOutput> {
        let prefix = self.prompt_embeddings(prompt, image_features)?;
        let sem = self.tokenizer.sem_token_id();
        match mode {
            GenerationMode::TeacherForced => {
                let target = &prompt.target_suffix;
                let n = target.len();
                let seq = Tensor::cat(&[&prefix, &self.lm.embed_tokens(target)?], 0)?;
                let total = seq.dim(0)?;
                let hidden = self.lm.forward(&seq, &mut KvCache::default())?;
                // position p predicts token p + 1
                let pred = hidden.narrow(0, total - n - 1, n)?;
                let logits = self.lm.logits(&pred)?;
                Ok(GenerationOutput {
                    text_tokens: target.clone(),
                    hidden_states: hidden.narrow(0, total - n, n)?,
                    logits: Some(logits),
                    sem_positions: positions_of(target, sem),
                })
            }
            GenerationMode::Free => {
                let mut cache = KvCache::default();
                let hidden = self.lm.forward(&prefix, &mut cache)?;
                let mut last = hidden.narrow(0, hidden.dim(0)? - 1, 1)?;
                let mut tokens = Vec::new();
                let mut states = Vec::new();
                for _ in 0..MAX_NEW_TOKENS {
                    let next = self
                        .lm
                        .logits(&last)?
                        .squeeze(0)?
                        .argmax(D::Minus1)?
                        .to_scalar::<u32>()?;
                    tokens.push(next);
                    last = self.lm.forward(&self.lm.embed_tokens(&[next])?, &mut cache)?;
                    states.push(last.clone());
                    if next == sem || next == self.tokenizer.eos_id() {
                        break;
                    }
                }
                Ok(GenerationOutput {
                    sem_positions: positions_of(&tokens, sem),
                    text_tokens: tokens,
                    hidden_states: Tensor::cat(&states, 0)?,
                    logits: None,
                })
            }
        }
    }

    /// Semantic-prompt hidden state for one episode, plus whether the fallback
    /// (final generated position) had to be used.
    pub fn semantic_hidden(&self, gen: &GenerationOutput) -> Result<(Tensor, bool)> {
        match extract_sem_hidden(gen) {
            Ok(h) => Ok((h, false)),
            Err(Error::SemanticPromptUnavailable) => {
                log::debug!(
                    "no {} in generated text {:?}; using final position",
                    tokenizer::SEM_TOKEN,
                    self.tokenizer.decode(&gen.text_tokens)
                );
                let n = gen.hidden_states.dim(0)?;
                Ok((gen.hidden_states.get(n - 1)?, true))
            }
            Err(e) => Err(e),
        }
    }

    /// `(B, d_lm)` → `(B, d_p)`
    pub fn project_semantic(&self, h_sem: &Tensor) -> Result<SemanticPrompt> {
        project_semantic(&self.proj, h_sem, self.lm.d_model())
    }
}

impl LanguageModelAdapter for SemanticEncoder {
    fn hidden_width(&self) -> usize {
        self.lm.d_model()
    }

    fn tokenizer(&self) -> &ExtendedTokenizer {
        &self.tokenizer
    }

    fn generate(
        &self,
        prompt: &PromptSequence,
        image_features: &Tensor,
        mode: GenerationMode,
    ) -> Result<GenerationOutput> {
        self.generate_semantic(prompt, image_features, mode)
    }
}

fn positions_of(tokens: &[u32], id: u32) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == id)
        .map(|(i, _)| i)
        .collect()
}

/// Hidden state at the first `<SEM_prompt>` occurrence.
pub fn extract_sem_hidden(gen: &GenerationOutput) -> Result<Tensor> {
    let &first = gen
        .sem_positions
        .first()
        .ok_or(Error::SemanticPromptUnavailable)?;
    Ok(gen.hidden_states.get(first)?)
}

pub fn project_semantic(proj: &Mlp, h_sem: &Tensor, d_lm: usize) -> Result<SemanticPrompt> {
    let width = h_sem.dim(D::Minus1)?;
    if width != d_lm {
        return Err(Error::Shape(format!("h_sem has width {width}, expected {d_lm}")));
    }
    Ok(SemanticPrompt {
        embedding: proj.forward(h_sem)?,
    })
}
