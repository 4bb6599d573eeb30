//! K-shot voting, IoU metrics and the multi-seed episodic evaluation protocol.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, ClassRecord, Dataset, Episode, FoldSpec, Mask, Sample, Split};
use crate::decoder::binarize;
use crate::error::{Error, Result};
use crate::model::{episode_record, images_tensor, ImageFeatures, Pipeline};
use crate::semantic::{GenerationMode, SemanticPrompt};

pub const DEFAULT_TAU: f64 = 0.5;

/// Per-pixel count of foreground predictions over `k` passes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteMap {
    pub height: usize,
    pub width: usize,
    pub votes: Vec<u32>,
    pub k: u32,
}

impl VoteMap {
    pub fn from_predictions(preds: &[Mask]) -> Result<Self> {
        let first = preds
            .first()
            .ok_or_else(|| Error::InvalidArgument("no predictions to vote over".into()))?;
        let mut votes = vec![0u32; first.data.len()];
        for p in preds {
            if !p.same_shape(first) {
                return Err(Error::Shape("predictions differ in shape".into()));
            }
            for (v, &m) in votes.iter_mut().zip(&p.data) {
                *v += u32::from(m);
            }
        }
        Ok(Self {
            height: first.height,
            width: first.width,
            votes,
            k: preds.len() as u32,
        })
    }

    /// Foreground where `votes / k > tau`.
    pub fn threshold(&self, tau: f64) -> Mask {
        let mut mask = Mask::new(self.height, self.width);
        for (m, &v) in mask.data.iter_mut().zip(&self.votes) {
            *m = u8::from(v as f64 / self.k as f64 > tau);
        }
        mask
    }
}

pub fn vote(preds: &[Mask], tau: f64) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("vote threshold {tau} outside (0, 1)")));
    }
    Ok(VoteMap::from_predictions(preds)?.threshold(tau))
}

/// `|pred ∧ gt| / |pred ∨ gt|`, and 1 when both are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(p & g);
        union += usize::from(p | g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub mask: Mask,
    /// The semantic prompt had to fall back to the final generated position.
    pub fallback: bool,
}

/// Anything that segments a query given one annotated support.
pub trait SegmentModel {
    fn predict(&mut self, query: &Sample, support: &Sample, record: &ClassRecord) -> Result<Prediction>;

    /// Digest of the model parameters, if it has any.
    fn parameter_checksum(&self) -> Result<Option<String>> {
        Ok(None)
    }
}

/// Returns the query's ground truth.
pub struct OracleModel;

impl SegmentModel for OracleModel {
    fn predict(&mut self, query: &Sample, _: &Sample, _: &ClassRecord) -> Result<Prediction> {
        Ok(Prediction {
            mask: (*query.mask).clone(),
            fallback: false,
        })
    }
}

/// Predicts background everywhere.
pub struct BackgroundModel;

impl SegmentModel for BackgroundModel {
    fn predict(&mut self, query: &Sample, _: &Sample, _: &ClassRecord) -> Result<Prediction> {
        Ok(Prediction {
            mask: Mask::new(query.mask.height, query.mask.width),
            fallback: false,
        })
    }
}

#[derive(Debug, Clone)]
pub struct KshotPrediction {
    pub mask: Mask,
    pub votes: VoteMap,
    pub fallbacks: usize,
}

/// One forward pass per support with the same query, then pixel-wise voting.
pub fn kshot_predict(model: &mut dyn SegmentModel, episode: &Episode, tau: f64) -> Result<KshotPrediction> {
    if episode.k() == 0 {
        return Err(Error::InvalidArgument("episode has no supports".into()));
    }
    let record = episode_record(episode);
    let mut preds = Vec::with_capacity(episode.k());
    let mut fallbacks = 0;
    for support in &episode.support {
        let p = model.predict(&episode.query, support, &record)?;
        fallbacks += usize::from(p.fallback);
        preds.push(p.mask);
    }
    let votes = VoteMap::from_predictions(&preds)?;
    let mask = vote(&preds, tau)?;
    Ok(KshotPrediction { mask, votes, fallbacks })
}

/// Wraps a pipeline for evaluation. Backbone features and free-mode semantic
/// prompts are cached per image, so repeated episodes only re-run matching and
/// decoding.
pub struct PipelineModel<'a> {
    pipeline: &'a Pipeline,
    threshold: f64,
    features: HashMap<(u32, usize), ImageFeatures>,
    semantic: HashMap<(u32, u32, usize), (SemanticPrompt, bool, bool)>,
}

impl<'a> PipelineModel<'a> {
    pub fn new(pipeline: &'a Pipeline) -> Self {
        Self {
            pipeline,
            threshold: 0.0,
            features: HashMap::new(),
            semantic: HashMap::new(),
        }
    }

    pub fn pipeline(&self) -> &Pipeline {
        self.pipeline
    }

    /// Fraction of free-mode generations so far that emitted the segmentation token.
    pub fn sem_emission_rate(&self) -> Option<f64> {
        if self.semantic.is_empty() {
            return None;
        }
        let emitted = self.semantic.values().filter(|v| v.2).count();
        Some(emitted as f64 / self.semantic.len() as f64)
    }

    fn features(&mut self, s: &Sample) -> Result<ImageFeatures> {
        let key = (s.class_id, s.index);
        if let Some(f) = self.features.get(&key) {
            return Ok(f.clone());
        }
        let img = images_tensor(&[&s.image], self.pipeline.dtype())?;
        let f = self.pipeline.image_features(&img)?;
        let detach = |v: &[Tensor]| v.iter().map(Tensor::detach).collect::<Vec<_>>();
        let mut f = f;
        f.pyramid.levels = detach(&f.pyramid.levels);
        f.query.features = f.query.features.detach();
        f.query.high_res = detach(&f.query.high_res);
        self.features.insert(key, f.clone());
        Ok(f)
    }

    fn semantic(&mut self, query: &Sample, record: &ClassRecord) -> Result<(SemanticPrompt, bool)> {
        let key = (record.class_id, query.class_id, query.index);
        if let Some((p, fallback, _)) = self.semantic.get(&key) {
            return Ok((p.clone(), *fallback));
        }
        let img = images_tensor(&[&query.image], self.pipeline.dtype())?;
        let batch = self.pipeline.semantic_prompts(&img, &[record], GenerationMode::Free)?;
        let prompt = SemanticPrompt {
            embedding: batch.prompt.embedding.detach(),
        };
        let fallback = batch.fallbacks[0];
        self.semantic
            .insert(key, (prompt.clone(), fallback, batch.sem_emitted[0]));
        Ok((prompt, fallback))
    }
}

impl SegmentModel for PipelineModel<'_> {
    fn predict(&mut self, query: &Sample, support: &Sample, record: &ClassRecord) -> Result<Prediction> {
        let cfg = self.pipeline.config().clone();
        let q = self.features(query)?;
        let vis = if cfg.use_visual {
            let s = self.features(support)?;
            Some(self.pipeline.visual_prompt(&q.pyramid, &s.pyramid, &[&support.mask])?)
        } else {
            None
        };
        let (sem, fallback) = if cfg.use_semantic {
            let (p, f) = self.semantic(query, record)?;
            (Some(p), f)
        } else {
            (None, false)
        };
        let logits = self.pipeline.decode(&q.query, vis.as_ref(), sem.as_ref())?;
        let mut masks = binarize(&logits, self.threshold)?;
        Ok(Prediction {
            mask: masks.remove(0),
            fallback,
        })
    }

    fn parameter_checksum(&self) -> Result<Option<String>> {
        Ok(Some(self.pipeline.store().checksum()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub episodes: usize,
    pub seeds: usize,
    pub k: usize,
    pub tau: f64,
    /// First seed; seeds are `base_seed..base_seed + seeds`.
    pub base_seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            episodes: 1000,
            seeds: 5,
            k: 1,
            tau: DEFAULT_TAU,
            base_seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.seeds == 0 || self.k == 0 {
            return Err(Error::Config("episodes, seeds and k must all be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.base_seed + i).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub seed: u64,
    pub episode: usize,
    pub class_id: u32,
    pub iou: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub miou: f64,
    pub per_class: BTreeMap<u32, f64>,
    pub fallback_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    /// Set for cross-domain runs: the dataset the weights were trained on.
    pub train_dataset: Option<String>,
    pub fold: usize,
    pub k: usize,
    pub episodes_per_seed: usize,
    /// fold → per-seed mIoU.
    pub per_fold: BTreeMap<usize, Vec<f64>>,
    pub seeds: Vec<SeedResult>,
    pub mean_miou: f64,
    pub episode_count: usize,
    pub fallback_events: usize,
    pub sem_emission_rate: Option<f64>,
    pub config: serde_json::Value,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse("eval report", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse("trace csv", e))?;
        for row in &self.trace {
            w.serialize(row).map_err(|e| Error::parse("trace csv", e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Samples `episodes` test episodes for every seed and reports per-class-then-mean IoU.
pub fn evaluate_fold(
    model: &mut dyn SegmentModel,
    dataset: &Dataset,
    fold: &FoldSpec,
    protocol: &EvalProtocol,
    config: serde_json::Value,
) -> Result<EvalReport> {
    protocol.validate()?;
    let test = fold.classes(Split::Test);
    if test.is_empty() {
        return Err(Error::EmptySplit);
    }
    for &c in test {
        dataset.class_record(c)?;
    }
    let mut seeds = Vec::with_capacity(protocol.seeds);
    let mut trace = Vec::new();
    for seed in protocol.seed_list() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut per_class: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        let mut fallbacks = 0;
        for i in 0..protocol.episodes {
            let ep = sample_episode(dataset, fold, Split::Test, protocol.k, &mut rng)?;
            let pred = kshot_predict(model, &ep, protocol.tau)?;
            let score = iou(&pred.mask, ep.query_mask())?;
            let entry = per_class.entry(ep.class_id).or_default();
            entry.0 += score;
            entry.1 += 1;
            fallbacks += pred.fallbacks;
            trace.push(TraceRow {
                seed,
                episode: i,
                class_id: ep.class_id,
                iou: score,
                fallback: pred.fallbacks > 0,
            });
        }
        let per_class: BTreeMap<u32, f64> = per_class
            .into_iter()
            .map(|(c, (sum, n))| (c, sum / n as f64))
            .collect();
        let miou = per_class.values().sum::<f64>() / per_class.len() as f64;
        seeds.push(SeedResult {
            seed,
            miou,
            per_class,
            fallback_events: fallbacks,
        });
    }
    let per_seed: Vec<f64> = seeds.iter().map(|s| s.miou).collect();
    let mean_miou = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    Ok(EvalReport {
        dataset: dataset.name().to_string(),
        train_dataset: None,
        fold: fold.fold_index,
        k: protocol.k,
        episodes_per_seed: protocol.episodes,
        per_fold: BTreeMap::from([(fold.fold_index, per_seed)]),
        fallback_events: seeds.iter().map(|s| s.fallback_events).sum(),
        seeds,
        mean_miou,
        episode_count: protocol.episodes * protocol.seeds,
        sem_emission_rate: None,
        config,
        trace,
    })
}

/// Runs the standard protocol on a dataset the weights were not trained on and
/// verifies that no parameter changed.
pub fn cross_domain_eval(
    pipeline: &Pipeline,
    train_dataset: &str,
    dataset: &Dataset,
    fold: &FoldSpec,
    protocol: &EvalProtocol,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if dataset.resolution != pipeline.config().image_size {
        return Err(Error::Config(format!(
            "dataset resolution {} does not match the checkpoint's image size {}",
            dataset.resolution,
            pipeline.config().image_size
        )));
    }
    let before = pipeline.store().checksum()?;
    let mut model = PipelineModel::new(pipeline);
    let mut report = evaluate_fold(&mut model, dataset, fold, protocol, config)?;
    report.sem_emission_rate = model.sem_emission_rate();
    let after = pipeline.store().checksum()?;
    if before != after {
        return Err(Error::Checkpoint("parameters changed during cross-domain evaluation".into()));
    }
    report.train_dataset = Some(train_dataset.to_string());
    Ok(report)
}
