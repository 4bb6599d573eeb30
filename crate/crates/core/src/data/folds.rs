use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::meta::DatasetMeta;
use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub dataset: String,
    pub fold_index: usize,
    pub train_classes: BTreeSet<u32>,
    pub test_classes: BTreeSet<u32>,
}

impl FoldSpec {
    pub fn classes(&self, split: Split) -> &BTreeSet<u32> {
        match split {
            Split::Train => &self.train_classes,
            Split::Test => &self.test_classes,
        }
    }
}

/// Test classes are the `fold_index`-th contiguous quarter of the sorted class ids
/// (classes `5i+1..=5i+5` on a 20-class dataset); all others are training classes.
pub fn make_folds(meta: &DatasetMeta, fold_index: usize) -> Result<FoldSpec> {
    if fold_index >= NUM_FOLDS {
        return Err(Error::FoldIndex(fold_index));
    }
    let n = meta.class_ids.len();
    if n == 0 || n % NUM_FOLDS != 0 {
        return Err(Error::ClassCount(n));
    }
    let mut sorted = meta.class_ids.clone();
    sorted.sort_unstable();
    let quarter = n / NUM_FOLDS;
    let lo = fold_index * quarter;
    let hi = lo + quarter;
    let (mut train, mut test) = (BTreeSet::new(), BTreeSet::new());
    for (pos, id) in sorted.into_iter().enumerate() {
        if (lo..hi).contains(&pos) {
            test.insert(id);
        } else {
            train.insert(id);
        }
    }
    Ok(FoldSpec {
        dataset: meta.name.clone(),
        fold_index,
        train_classes: train,
        test_classes: test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::meta::ImageRecord;
    use std::collections::BTreeMap;

    pub(crate) fn meta_with(n: u32) -> DatasetMeta {
        let index: BTreeMap<u32, Vec<ImageRecord>> = (1..=n)
            .map(|c| {
                let recs = (0..2)
                    .map(|i| ImageRecord {
                        image: format!("{c}/{i}.png").into(),
                        mask: format!("{c}/{i}_m.png").into(),
                    })
                    .collect();
                (c, recs)
            })
            .collect();
        DatasetMeta::new("t", "/tmp", None, index).unwrap()
    }

    #[test]
    fn twenty_classes_fold_zero() {
        let f = make_folds(&meta_with(20), 0).unwrap();
        assert_eq!(f.train_classes.len(), 15);
        assert_eq!(f.test_classes, (1..=5).collect());
    }

    #[test]
    fn eighty_classes_fold_two_matches_enumeration() {
        let meta = meta_with(80);
        let f = make_folds(&meta, 2).unwrap();
        // brute-force: positions 40..60 of the sorted id list
        let mut sorted = meta.class_ids.clone();
        sorted.sort();
        let expected: BTreeSet<u32> = sorted[40..60].iter().copied().collect();
        assert_eq!(f.test_classes, expected);
        let all: BTreeSet<u32> = sorted.iter().copied().collect();
        assert!(f.train_classes.is_disjoint(&f.test_classes));
        let union: BTreeSet<u32> = f.train_classes.union(&f.test_classes).copied().collect();
        assert_eq!(union, all);
        assert_eq!(f.train_classes.len(), 3 * f.test_classes.len());
    }

    #[test]
    fn folds_partition_and_are_disjoint() {
        let meta = meta_with(20);
        let folds: Vec<_> = (0..4).map(|i| make_folds(&meta, i).unwrap()).collect();
        assert!(folds[0].test_classes.is_disjoint(&folds[1].test_classes));
        let covered: BTreeSet<u32> = folds.iter().flat_map(|f| f.test_classes.iter().copied()).collect();
        assert_eq!(covered.len(), 20);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(make_folds(&meta_with(20), 4), Err(Error::FoldIndex(4))));
        assert!(matches!(make_folds(&meta_with(6), 0), Err(Error::ClassCount(6))));
    }
}
