//! Single-file checkpoints: parameters and optimizer moments as safetensors,
//! with the configuration, vocabulary, rng state and step in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Pipeline};
use crate::nn::AdamW;
use crate::semantic::tokenizer::Vocab;

use super::TrainConfig;

const OPTIM_PREFIX: &str = "adamw.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Base vocabulary, before the segmentation token is appended.
    pub vocab: Vocab,
    pub dtype: DType,
    pub step: u64,
    pub epoch: usize,
    pub rng: Option<ChaCha8Rng>,
    /// Name of the dataset the weights were trained on.
    pub dataset: Option<String>,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

fn meta_get<'a>(meta: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("metadata key {key:?} missing")))
}

impl Checkpoint {
    pub fn capture(
        pipeline: &Pipeline,
        optimizer: Option<&AdamW>,
        train: Option<&TrainConfig>,
        rng: Option<&ChaCha8Rng>,
        epoch: usize,
        dataset: Option<&str>,
    ) -> Result<Self> {
        let base: Vec<String> = pipeline.tokenizer().vocab().tokens()[..pipeline.tokenizer().base_size()].to_vec();
        Ok(Self {
            model: pipeline.config().clone(),
            train: train.cloned(),
            vocab: Vocab::from_tokens(base)?,
            dtype: pipeline.dtype(),
            step: optimizer.map_or(0, AdamW::steps_taken),
            epoch,
            rng: rng.cloned(),
            dataset: dataset.map(str::to_string),
            params: pipeline.store().snapshot()?,
            optimizer: optimizer.map(AdamW::state_tensors).unwrap_or_default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("model_config".to_string(), json(&self.model)?);
        if let Some(t) = &self.train {
            meta.insert("train_config".to_string(), json(t)?);
        }
        meta.insert("vocab".to_string(), json(self.vocab.tokens())?);
        meta.insert("dtype".to_string(), dtype_name(self.dtype).to_string());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("epoch".to_string(), self.epoch.to_string());
        if let Some(r) = &self.rng {
            meta.insert("rng".to_string(), json(r)?);
        }
        if let Some(d) = &self.dataset {
            meta.insert("dataset".to_string(), d.clone());
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let tensors: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .chain(self.optimizer.iter().map(|(k, v)| (k.clone(), v)))
            .collect();
        safetensors::serialize_to_file(tensors, Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?;
        let parse = |key: &str| -> Result<serde_json::Value> {
            serde_json::from_str(meta_get(&meta, key)?).map_err(|e| Error::parse(key, e))
        };
        let model: ModelConfig = serde_json::from_value(parse("model_config")?).map_err(|e| Error::parse("model_config", e))?;
        let train = match meta.get("train_config") {
            Some(_) => Some(serde_json::from_value(parse("train_config")?).map_err(|e| Error::parse("train_config", e))?),
            None => None,
        };
        let tokens: Vec<String> = serde_json::from_value(parse("vocab")?).map_err(|e| Error::parse("vocab", e))?;
        let rng = match meta.get("rng") {
            Some(_) => Some(serde_json::from_value(parse("rng")?).map_err(|e| Error::parse("rng", e))?),
            None => None,
        };
        let dtype = match meta_get(&meta, "dtype")? {
            "f64" => DType::F64,
            "f32" => DType::F32,
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
        };
        let num = |key: &str| -> Result<u64> { meta_get(&meta, key)?.parse().map_err(|e| Error::parse(key, e)) };
        let mut params = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (name, t) in candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)? {
            if name.starts_with(OPTIM_PREFIX) {
                optimizer.insert(name, t);
            } else {
                params.insert(name, t);
            }
        }
        Ok(Self {
            model,
            train,
            vocab: Vocab::from_tokens(tokens)?,
            dtype,
            step: num("step")?,
            epoch: num("epoch")? as usize,
            rng,
            dataset: meta.get("dataset").cloned(),
            params,
            optimizer,
        })
    }

    /// Rebuilds the pipeline and loads the stored weights into it.
    pub fn to_pipeline(&self) -> Result<Pipeline> {
        let pipeline = Pipeline::new(self.model.clone(), self.vocab.clone(), 0, self.dtype)?;
        pipeline.store().load(&self.params)?;
        Ok(pipeline)
    }
}

fn json<T: serde::Serialize + ?Sized>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Checkpoint(format!("serializing metadata: {e}")))
}
