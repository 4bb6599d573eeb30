//! Episodic training: combined text and mask objective, AdamW with a cosine
//! schedule, per-epoch checkpoints and a JSON-lines metrics log.

pub mod checkpoint;
pub mod loss;

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, Dataset, Episode, FoldSpec, Mask, Split};
use crate::error::{Error, Result};
use crate::model::{masks_tensor, Pipeline};
use crate::nn::{cosine_lr, AdamW, AdamWConfig, ParamGroup};
use crate::semantic::GenerationMode;

pub use checkpoint::Checkpoint;
pub use loss::{mask_loss, text_loss, total_loss, total_loss_value, LossWeights, MaskLoss};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LATEST_CHECKPOINT: &str = "checkpoint.safetensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch; an epoch is a fixed number of sampled episodes.
    pub steps_per_epoch: usize,
    /// Episodes per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub freeze_backbone: bool,
    pub freeze_language_model: bool,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 100,
            batch_size: 2,
            learning_rate: 3e-4,
            min_learning_rate: 0.0,
            schedule: Schedule::Cosine,
            seed: 0,
            freeze_backbone: false,
            freeze_language_model: false,
            weights: LossWeights::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("epochs and steps_per_epoch must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.min_learning_rate < 0.0 || self.min_learning_rate > self.learning_rate {
            return Err(Error::Config("min_learning_rate must lie in [0, learning_rate]".into()));
        }
        self.weights.validate()
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn frozen_groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        if self.freeze_backbone {
            out.push(ParamGroup::Backbone);
        }
        if self.freeze_language_model {
            out.extend([ParamGroup::LmEmbed, ParamGroup::LmBody, ParamGroup::LmHead]);
        }
        out
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(self.learning_rate, self.min_learning_rate, step, self.total_steps()),
            Schedule::Constant => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_text: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub total: f64,
    pub lr: f64,
}

/// Loss terms for one batch, still attached to the graph.
pub struct BatchLoss {
    pub text: Option<Tensor>,
    pub mask: MaskLoss,
    pub total: Tensor,
}

pub fn batch_loss(pipeline: &Pipeline, episodes: &[Episode], w: &LossWeights) -> Result<BatchLoss> {
    let out = pipeline.forward(episodes, GenerationMode::TeacherForced)?;
    let masks: Vec<&Mask> = episodes.iter().map(|e| e.query_mask()).collect();
    let gt = masks_tensor(&masks, pipeline.dtype())?;
    let mask = mask_loss(&out.mask_logits.logits, &gt, w)?;
    let text = if out.text.is_empty() {
        None
    } else {
        let per: Vec<Tensor> = out
            .text
            .iter()
            .map(|t| text_loss(&t.logits, &t.targets))
            .collect::<Result<_>>()?;
        Some(Tensor::stack(&per, 0)?.mean_all()?)
    };
    let total = match &text {
        Some(t) => total_loss(t, &mask.total, w)?,
        None => (&mask.total * w.lambda_mask)?,
    };
    Ok(BatchLoss { text, mask, total })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Serialize)]
struct EpisodeDump {
    class_id: u32,
    class_name: String,
    query: String,
    support: Vec<String>,
}

#[derive(Serialize)]
struct FailureDump<'a> {
    step: u64,
    lr: f64,
    l_text: Option<f64>,
    l_bce: f64,
    l_dice: f64,
    episodes: &'a [EpisodeDump],
}

pub struct Trainer {
    cfg: TrainConfig,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    out_dir: Option<PathBuf>,
    epoch: usize,
    history: Vec<StepMetrics>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, out_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            optimizer: AdamW::new(cfg.optimizer),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            out_dir: out_dir.map(Path::to_path_buf),
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint: restores step counter, moments, rng and epoch.
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint, out_dir: Option<&Path>) -> Result<Self> {
        let mut t = Self::new(cfg, out_dir)?;
        t.optimizer.restore(ckpt.step, &ckpt.optimizer);
        if let Some(rng) = &ckpt.rng {
            t.rng = rng.clone();
        }
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.steps_taken()
    }

    pub fn history(&self) -> &[StepMetrics] {
        &self.history
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn sample_batch(&mut self, dataset: &Dataset, fold: &FoldSpec) -> Result<Vec<Episode>> {
        (0..self.cfg.batch_size)
            .map(|_| sample_episode(dataset, fold, Split::Train, 1, &mut self.rng))
            .collect()
    }

    /// One optimizer step on the given episodes.
    pub fn train_step(&mut self, pipeline: &Pipeline, episodes: &[Episode]) -> Result<StepMetrics> {
        let step = self.optimizer.steps_taken();
        let lr = self.cfg.lr_at(step);
        let loss = batch_loss(pipeline, episodes, &self.cfg.weights)?;
        let l_text = loss.text.as_ref().map(scalar).transpose()?;
        let metrics = StepMetrics {
            step: step + 1,
            l_text: l_text.unwrap_or(0.0),
            l_bce: scalar(&loss.mask.bce)?,
            l_dice: scalar(&loss.mask.dice)?,
            total: scalar(&loss.total)?,
            lr,
        };
        if !metrics.total.is_finite() {
            let path = self.dump_failure(&metrics, l_text, episodes)?;
            return Err(Error::NonFinite(format!(
                "loss {} at step {}; episode dump: {}",
                metrics.total,
                metrics.step,
                path.map_or_else(|| "not written".to_string(), |p| p.display().to_string())
            )));
        }
        let grads = loss.total.backward()?;
        self.optimizer.step(pipeline.store(), &grads, lr, &self.cfg.frozen_groups())?;
        self.history.push(metrics);
        Ok(metrics)
    }

    fn dump_failure(&self, m: &StepMetrics, l_text: Option<f64>, episodes: &[Episode]) -> Result<Option<PathBuf>> {
        let eps: Vec<EpisodeDump> = episodes
            .iter()
            .map(|e| EpisodeDump {
                class_id: e.class_id,
                class_name: e.class_name.clone(),
                query: e.query.record.image.display().to_string(),
                support: e.support.iter().map(|s| s.record.image.display().to_string()).collect(),
            })
            .collect();
        let dump = FailureDump {
            step: m.step,
            lr: m.lr,
            l_text,
            l_bce: m.l_bce,
            l_dice: m.l_dice,
            episodes: &eps,
        };
        let text = serde_json::to_string_pretty(&dump).map_err(|e| Error::Checkpoint(e.to_string()))?;
        log::error!("non-finite loss at step {}: {text}", m.step);
        let Some(dir) = &self.out_dir else {
            return Ok(None);
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("nonfinite_step{}.json", m.step));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(Some(path))
    }

    fn append_metrics(&self, records: &[StepMetrics]) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        for r in records {
            let line = serde_json::to_string(r).map_err(|e| Error::Checkpoint(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, pipeline: &Pipeline, dataset: Option<&str>) -> Result<Checkpoint> {
        Checkpoint::capture(
            pipeline,
            Some(&self.optimizer),
            Some(&self.cfg),
            Some(&self.rng),
            self.epoch,
            dataset,
        )
    }

    /// Trains until the configured number of epochs is complete, writing a
    /// checkpoint after each epoch when an output directory is set.
    pub fn run(&mut self, pipeline: &Pipeline, dataset: &Dataset, fold: &FoldSpec) -> Result<&[StepMetrics]> {
        let start = self.history.len();
        while self.epoch < self.cfg.epochs {
            let epoch_start = self.history.len();
            for _ in 0..self.cfg.steps_per_epoch {
                let batch = self.sample_batch(dataset, fold)?;
                let m = self.train_step(pipeline, &batch)?;
                if m.step % 50 == 0 {
                    log::info!(
                        "step {} lr {:.2e} total {:.4} text {:.4} bce {:.4} dice {:.4}",
                        m.step,
                        m.lr,
                        m.total,
                        m.l_text,
                        m.l_bce,
                        m.l_dice
                    );
                }
            }
            self.epoch += 1;
            self.append_metrics(&self.history[epoch_start..])?;
            if let Some(dir) = &self.out_dir {
                let ckpt = self.checkpoint(pipeline, Some(dataset.name()))?;
                ckpt.save(&dir.join(format!("checkpoint_epoch{}.safetensors", self.epoch)))?;
                ckpt.save(&dir.join(LATEST_CHECKPOINT))?;
            }
        }
        Ok(&self.history[start..])
    }
}
