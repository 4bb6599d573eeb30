//! Run configuration: one TOML file merging data paths, model dims, training
//! and evaluation settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::meta::DESCRIPTIONS_FILE;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::model::{Ablation, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Defaults to `descriptions.json` under `root`.
    pub descriptions: Option<PathBuf>,
    pub resolution: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/shapes"),
            descriptions: None,
            resolution: 128,
        }
    }
}

impl DataConfig {
    pub fn descriptions_path(&self) -> PathBuf {
        self.descriptions
            .clone()
            .unwrap_or_else(|| self.root.join(DESCRIPTIONS_FILE))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub synth: SynthConfig,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("run config", e))
    }

    /// Relative data paths are resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.root);
        if let Some(d) = cfg.data.descriptions.as_mut() {
            resolve(d);
        }
        if let Some(o) = cfg.output_dir.as_mut() {
            resolve(o);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("run config", e))
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        self.model = self.model.clone().with_ablation(ablation);
    }

    /// Checks internal consistency (no filesystem access).
    pub fn validate_dims(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.data.resolution != self.model.image_size {
            return Err(Error::Config(format!(
                "data.resolution {} differs from model.image_size {}",
                self.data.resolution, self.model.image_size
            )));
        }
        Ok(())
    }

    /// Full validation, including that the dataset paths exist.
    pub fn validate(&self) -> Result<()> {
        self.validate_dims()?;
        for p in [self.data.root.clone(), self.data.descriptions_path()] {
            if !p.exists() {
                return Err(Error::Config(format!("path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}
