//! The assembled pipeline: backbone, semantic encoder, dense matcher and mask
//! decoder, with ablation switches for either prompt branch.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::prompt::{prompt_text, ANSWER_PREFIX};
use crate::data::{build_prompt, ClassRecord, Episode, Image, Mask};
use crate::decoder::{DecoderConfig, MaskDecoder, MaskLogits};
use crate::error::{Error, Result};
use crate::matching::{DenseMatcher, MatchingConfig, VisualPrompt};
use crate::nn::ParamStore;
use crate::semantic::tokenizer::{ExtendedTokenizer, Vocab};
use crate::semantic::{GenerationMode, LanguageModelAdapter, SemanticConfig, SemanticEncoder, SemanticPrompt};
use crate::vision::{BackboneConfig, ConvBackbone, FeaturePyramid, QueryFeatureMap, VisionBackbone};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    SemanticOnly,
    VisualOnly,
}

impl Ablation {
    pub fn flags(self) -> (bool, bool) {
        match self {
            Ablation::Full => (true, true),
            Ablation::SemanticOnly => (true, false),
            Ablation::VisualOnly => (false, true),
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "semantic_only" => Ok(Ablation::SemanticOnly),
            "visual_only" => Ok(Ablation::VisualOnly),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?}; expected full, semantic_only or visual_only"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub prompt_dim: usize,
    pub use_semantic: bool,
    pub use_visual: bool,
    pub backbone: BackboneConfig,
    pub semantic: SemanticConfig,
    pub matching: MatchingConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            prompt_dim: 64,
            use_semantic: true,
            use_visual: true,
            backbone: BackboneConfig::default(),
            semantic: SemanticConfig::default(),
            matching: MatchingConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        (self.use_semantic, self.use_visual) = ablation.flags();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_semantic && !self.use_visual {
            return Err(Error::Config("at least one of use_semantic / use_visual must be set".into()));
        }
        let min = 2 * self.backbone.level_stride(self.backbone.stage_channels.len().saturating_sub(1));
        if self.image_size < min || self.image_size % min != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {min}",
                self.image_size
            )));
        }
        if self.prompt_dim % 4 != 0 || self.prompt_dim == 0 {
            return Err(Error::Config("prompt_dim must be a positive multiple of 4".into()));
        }
        if self.semantic.lm.d_model % self.semantic.lm.heads != 0 {
            return Err(Error::Config("language model width must divide into its heads".into()));
        }
        if self.matching.hp < 2 {
            return Err(Error::Config("matching resolution must be at least 2".into()));
        }
        Ok(())
    }
}

/// Vocabulary covering the prompt template, the answer and every description.
pub fn base_vocab(records: &BTreeMap<u32, ClassRecord>) -> Vocab {
    let texts: Vec<String> = records.values().map(prompt_text).collect();
    Vocab::build(texts.iter().map(String::as_str).chain([ANSWER_PREFIX]))
}

/// `(B, 3, S, S)` batch from HWC images.
pub fn images_tensor(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape("images in a batch must share one resolution".into()));
        }
        data.extend(img.to_chw());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `(B, H, W)` 0/1 tensor.
pub fn masks_tensor(masks: &[&Mask], dtype: DType) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty mask batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if (m.height, m.width) != (h, w) {
            return Err(Error::Shape("masks in a batch must share one resolution".into()));
        }
        data.extend(m.data.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (masks.len(), h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Teacher-forced logits for one episode and the tokens they should predict.
#[derive(Debug, Clone)]
pub struct TextTarget {
    pub logits: Tensor,
    pub targets: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct SemanticBatch {
    pub prompt: SemanticPrompt,
    pub text: Vec<TextTarget>,
    /// Per episode: whether the final-position fallback was used.
    pub fallbacks: Vec<bool>,
    pub sem_emitted: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub mask_logits: MaskLogits,
    pub text: Vec<TextTarget>,
    pub fallbacks: Vec<bool>,
}

/// Image-side features computed once per image and reusable across episodes.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    pub pyramid: FeaturePyramid,
    pub query: QueryFeatureMap,
}

pub struct Pipeline {
    cfg: ModelConfig,
    store: ParamStore,
    backbone: ConvBackbone,
    semantic: SemanticEncoder,
    matcher: DenseMatcher,
    decoder: MaskDecoder,
}

impl Pipeline {
    pub fn new(cfg: ModelConfig, vocab: Vocab, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let backbone = ConvBackbone::new(&mut store, &mut rng, cfg.backbone.clone())?;
        let semantic = SemanticEncoder::new(&mut store, &mut rng, cfg.semantic, vocab, cfg.prompt_dim)?;
        let matcher = DenseMatcher::new(
            &mut store,
            &mut rng,
            cfg.matching.clone(),
            backbone.num_levels(),
            cfg.prompt_dim,
        )?;
        let hr = backbone.high_res_channels();
        let decoder = MaskDecoder::new(
            &mut store,
            &mut rng,
            cfg.decoder,
            cfg.prompt_dim,
            backbone.query_channels(),
            [hr[0], hr[1]],
        )?;
        Ok(Self {
            cfg,
            store,
            backbone,
            semantic,
            matcher,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn tokenizer(&self) -> &ExtendedTokenizer {
        self.semantic.tokenizer()
    }

    pub fn semantic_encoder(&self) -> &SemanticEncoder {
        &self.semantic
    }

    pub fn matcher(&self) -> &DenseMatcher {
        &self.matcher
    }

    pub fn decoder(&self) -> &MaskDecoder {
        &self.decoder
    }

    pub fn backbone(&self) -> &ConvBackbone {
        &self.backbone
    }

    /// Switches the ablation flags in place; parameters are unaffected.
    pub fn set_ablation(&mut self, ablation: Ablation) {
        self.cfg = self.cfg.clone().with_ablation(ablation);
    }

    pub fn image_features(&self, images: &Tensor) -> Result<ImageFeatures> {
        let (pyramid, query) = self.backbone.extract(images)?;
        Ok(ImageFeatures { pyramid, query })
    }

    /// Semantic prompts for a batch of query images, one class record each.
    pub fn semantic_prompts(
        &self,
        query_images: &Tensor,
        records: &[&ClassRecord],
        mode: GenerationMode,
    ) -> Result<SemanticBatch> {
        let image_tokens = self.semantic.image_tokens(query_images)?;
        let mut hidden = Vec::with_capacity(records.len());
        let mut text = Vec::new();
        let mut fallbacks = Vec::with_capacity(records.len());
        let mut sem_emitted = Vec::with_capacity(records.len());
        for (i, record) in records.iter().enumerate() {
            let prompt = build_prompt(record, self.semantic.tokenizer())?;
            let gen = self.semantic.generate(&prompt, &image_tokens.get(i)?, mode)?;
            let (h, fallback) = self.semantic.semantic_hidden(&gen)?;
            if fallback {
                log::info!("semantic prompt fallback for class {}", record.class_id);
            }
            sem_emitted.push(!gen.sem_positions.is_empty());
            hidden.push(h);
            fallbacks.push(fallback);
            if let Some(logits) = gen.logits {
                text.push(TextTarget {
                    logits,
                    targets: gen.text_tokens,
                });
            }
        }
        let h = Tensor::stack(&hidden, 0)?;
        Ok(SemanticBatch {
            prompt: self.semantic.project_semantic(&h)?,
            text,
            fallbacks,
            sem_emitted,
        })
    }

    pub fn visual_prompt(
        &self,
        query: &FeaturePyramid,
        support: &FeaturePyramid,
        support_masks: &[&Mask],
    ) -> Result<VisualPrompt> {
        self.matcher.forward(query, support, support_masks)
    }

    pub fn decode(
        &self,
        query: &QueryFeatureMap,
        vis: Option<&VisualPrompt>,
        sem: Option<&SemanticPrompt>,
    ) -> Result<MaskLogits> {
        self.decoder.forward(query, vis, sem, self.cfg.image_size)
    }

    /// Training forward over one-shot views of the episodes (first support of
    /// each). Text logits are teacher-forced.
    pub fn forward(&self, episodes: &[Episode], mode: GenerationMode) -> Result<ForwardOutput> {
        if episodes.is_empty() {
            return Err(Error::InvalidArgument("empty episode batch".into()));
        }
        let b = episodes.len();
        let dtype = self.dtype();
        let mut images: Vec<&Image> = episodes.iter().map(|e| e.query_image()).collect();
        images.extend(episodes.iter().map(|e| &*e.support[0].image));
        let all = images_tensor(&images, dtype)?;
        let feats = self.image_features(&all)?;
        let query_pyr = feats.pyramid.narrow(0, b)?;
        let support_pyr = feats.pyramid.narrow(b, b)?;
        let query_map = feats.query.narrow(0, b)?;

        let vis = if self.cfg.use_visual {
            let masks: Vec<&Mask> = episodes.iter().map(|e| &*e.support[0].mask).collect();
            Some(self.visual_prompt(&query_pyr, &support_pyr, &masks)?)
        } else {
            None
        };
        let (sem, text, fallbacks) = if self.cfg.use_semantic {
            let records: Vec<ClassRecord> = episodes.iter().map(episode_record).collect();
            let refs: Vec<&ClassRecord> = records.iter().collect();
            let batch = self.semantic_prompts(&all.narrow(0, 0, b)?, &refs, mode)?;
            (Some(batch.prompt), batch.text, batch.fallbacks)
        } else {
            (None, Vec::new(), vec![false; b])
        };
        let mask_logits = self.decode(&query_map, vis.as_ref(), sem.as_ref())?;
        Ok(ForwardOutput {
            mask_logits,
            text,
            fallbacks,
        })
    }
}

pub fn episode_record(e: &Episode) -> ClassRecord {
    ClassRecord {
        class_id: e.class_id,
        class_name: e.class_name.clone(),
        description: e.description.clone(),
    }
}
