use std::collections::BTreeMap;
use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Coarse grouping of parameters, used for freezing and per-group gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    LmImage,
    LmEmbed,
    LmBody,
    LmHead,
    SemProj,
    Matching,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Backbone,
        ParamGroup::LmImage,
        ParamGroup::LmEmbed,
        ParamGroup::LmBody,
        ParamGroup::LmHead,
        ParamGroup::SemProj,
        ParamGroup::Matching,
        ParamGroup::Decoder,
    ];
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::LmImage => "lm_image",
            ParamGroup::LmEmbed => "lm_embed",
            ParamGroup::LmBody => "lm_body",
            ParamGroup::LmHead => "lm_head",
            ParamGroup::SemProj => "sem_proj",
            ParamGroup::Matching => "matching",
            ParamGroup::Decoder => "decoder",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

impl Init {
    /// He-normal for layers followed by a rectifier.
    pub fn he(fan_in: usize) -> Self {
        Init::Normal((2.0 / fan_in as f64).sqrt())
    }

    pub fn xavier(fan_in: usize, fan_out: usize) -> Self {
        Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }
}

struct Entry {
    var: Var,
    group: ParamGroup,
}

/// Owns every trainable tensor of a model, keyed by a dotted name.
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            entries: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn create(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = init.sample(n, rng);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.insert(name, t, group)
    }

    /// Registers a tensor as a parameter, replacing any entry with the same name.
    pub fn insert(&mut self, name: &str, value: Tensor, group: ParamGroup) -> Result<Tensor> {
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.entries.insert(name.to_string(), Entry { var, group });
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        self.entries.get(name).map(|e| e.group)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var, ParamGroup)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.var, e.group))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.var.elem_count()).sum()
    }

    /// Overwrites parameter values in place; names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, entry) in &self.entries {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.dims() != entry.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, checkpoint has {:?}",
                    entry.var.dims(),
                    src.dims()
                )));
            }
            entry.var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(k, e)| Ok((k.clone(), e.var.as_tensor().copy()?)))
            .collect()
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn checksum(&self) -> Result<String> {
        self.checksum_where(|_| true)
    }

    pub fn checksum_group(&self, group: ParamGroup) -> Result<String> {
        self.checksum_where(|g| g == group)
    }

    fn checksum_where(&self, keep: impl Fn(ParamGroup) -> bool) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, entry) in &self.entries {
            if !keep(entry.group) {
                continue;
            }
            hasher.update(name.as_bytes());
            for d in entry.var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values = entry
                .var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
