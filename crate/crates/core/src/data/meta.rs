use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::descriptions::{load_class_descriptions, ClassRecord};
use super::image::{Image, Mask};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const DESCRIPTIONS_FILE: &str = "descriptions.json";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Class inventory of a dataset. Paths in `image_index` are relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub root: PathBuf,
    pub resolution: Option<usize>,
    pub class_ids: Vec<u32>,
    pub image_index: BTreeMap<u32, Vec<ImageRecord>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resolution: Option<usize>,
    classes: BTreeMap<String, Vec<ImageRecord>>,
}

impl DatasetMeta {
    pub fn new(
        name: impl Into<String>,
        root: impl Into<PathBuf>,
        resolution: Option<usize>,
        image_index: BTreeMap<u32, Vec<ImageRecord>>,
    ) -> Result<Self> {
        let meta = Self {
            name: name.into(),
            root: root.into(),
            resolution,
            class_ids: image_index.keys().copied().collect(),
            image_index,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_ids.is_empty() {
            return Err(Error::parse("dataset index", "no classes"));
        }
        let unique: BTreeSet<_> = self.class_ids.iter().collect();
        if unique.len() != self.class_ids.len() {
            return Err(Error::parse("dataset index", "duplicate class ids"));
        }
        for id in &self.class_ids {
            let n = self.image_index.get(id).map_or(0, Vec::len);
            if n < 2 {
                return Err(Error::NotEnoughImages {
                    class_id: *id,
                    available: n,
                    needed: 2,
                });
            }
        }
        Ok(())
    }

    pub fn read_index(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: IndexFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        let mut index = BTreeMap::new();
        for (key, records) in file.classes {
            let id: u32 = key
                .parse()
                .map_err(|_| Error::parse("dataset index", format!("class key {key:?} is not an integer")))?;
            if index.insert(id, records).is_some() {
                return Err(Error::DuplicateClass(id));
            }
        }
        Self::new(file.name, root, file.resolution, index)
    }

    pub fn write_index(&self) -> Result<()> {
        let file = IndexFile {
            name: self.name.clone(),
            resolution: self.resolution,
            classes: self
                .image_index
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        };
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(&file).expect("index serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// One loaded image/mask pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub class_id: u32,
    pub index: usize,
    pub record: ImageRecord,
    pub image: Arc<Image>,
    pub mask: Arc<Mask>,
}

/// A dataset held in memory at one square resolution, with class descriptions.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub resolution: usize,
    pub classes: BTreeMap<u32, ClassRecord>,
    samples: BTreeMap<u32, Vec<Sample>>,
}

impl Dataset {
    /// Reads `index.json` and descriptions under `root`, loading every image.
    /// Records whose mask is empty after resizing are dropped.
    pub fn open(root: &Path, descriptions: Option<&Path>, resolution: usize) -> Result<Self> {
        let meta = DatasetMeta::read_index(root)?;
        let desc_path = descriptions
            .map(Path::to_path_buf)
            .unwrap_or_else(|| root.join(DESCRIPTIONS_FILE));
        let classes = load_class_descriptions(&desc_path)?;
        let mut samples = BTreeMap::new();
        for (&class_id, records) in &meta.image_index {
            let mut loaded = Vec::with_capacity(records.len());
            for record in records {
                let image = Image::load(&meta.root.join(&record.image), resolution)?;
                let mask = Mask::load(&meta.root.join(&record.mask), resolution)?;
                if mask.foreground() == 0 {
                    log::warn!("dropping {}: empty mask", record.mask.display());
                    continue;
                }
                loaded.push(Sample {
                    class_id,
                    index: loaded.len(),
                    record: record.clone(),
                    image: Arc::new(image),
                    mask: Arc::new(mask),
                });
            }
            samples.insert(class_id, loaded);
        }
        Self::from_parts(meta, resolution, classes, samples)
    }

    pub fn from_parts(
        meta: DatasetMeta,
        resolution: usize,
        classes: BTreeMap<u32, ClassRecord>,
        samples: BTreeMap<u32, Vec<Sample>>,
    ) -> Result<Self> {
        for id in &meta.class_ids {
            if !classes.contains_key(id) {
                return Err(Error::MissingDescription(*id));
            }
            let n = samples.get(id).map_or(0, Vec::len);
            if n < 2 {
                return Err(Error::NotEnoughImages {
                    class_id: *id,
                    available: n,
                    needed: 2,
                });
            }
        }
        Ok(Self {
            meta,
            resolution,
            classes,
            samples,
        })
    }

    pub fn name(&self) -> &str {
        &self.meta.name
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.meta.class_ids
    }

    pub fn samples(&self, class_id: u32) -> &[Sample] {
        self.samples.get(&class_id).map_or(&[], Vec::as_slice)
    }

    pub fn class_record(&self, class_id: u32) -> Result<&ClassRecord> {
        self.classes
            .get(&class_id)
            .ok_or(Error::MissingDescription(class_id))
    }
}
