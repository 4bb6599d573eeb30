use rand::seq::index;
use rand::Rng;

use super::folds::{FoldSpec, Split};
use super::image::{Image, Mask};
use super::meta::{Dataset, Sample};
use crate::error::{Error, Result};

/// One few-shot task: `K` annotated supports and a query of the same class.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<Sample>,
    pub query: Sample,
    pub class_id: u32,
    pub class_name: String,
    pub description: String,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn query_image(&self) -> &Image {
        &self.query.image
    }

    pub fn query_mask(&self) -> &Mask {
        &self.query.mask
    }

    /// Same query, support set reduced to the `i`-th support only.
    pub fn single_support(&self, i: usize) -> Episode {
        Episode {
            support: vec![self.support[i].clone()],
            ..self.clone()
        }
    }
}

/// Draws a class uniformly from the split, then `k + 1` distinct images of that
/// class: the first `k` are supports, the last is the query.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    fold: &FoldSpec,
    split: Split,
    k: usize,
    rng: &mut R,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let classes: Vec<u32> = fold.classes(split).iter().copied().collect();
    if classes.is_empty() {
        return Err(Error::EmptySplit);
    }
    let class_id = classes[rng.random_range(0..classes.len())];
    let pool = dataset.samples(class_id);
    if pool.len() < k + 1 {
        return Err(Error::NotEnoughImages {
            class_id,
            available: pool.len(),
            needed: k + 1,
        });
    }
    let picks = index::sample(rng, pool.len(), k + 1).into_vec();
    let record = dataset.class_record(class_id)?;
    Ok(Episode {
        support: picks[..k].iter().map(|&i| pool[i].clone()).collect(),
        query: pool[picks[k]].clone(),
        class_id,
        class_name: record.class_name.clone(),
        description: record.description.clone(),
    })
}
