use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tiling::parent_id;
use crate::error::{Error, Result};
use crate::rng;

/// Scene-level train/val/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// Shuffles `scene_ids` by `seed` and allocates `floor(n·ratio)` ids to val and
/// test; the remainder goes to train.
pub fn split_dataset(scene_ids: &[String], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if scene_ids.is_empty() {
        return Err(Error::Invalid("cannot split an empty id list".into()));
    }
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be fractions summing to 1")));
    }
    let unique: BTreeSet<&String> = scene_ids.iter().collect();
    if unique.len() != scene_ids.len() {
        return Err(Error::Invalid("duplicate scene ids".into()));
    }
    let mut ids = scene_ids.to_vec();
    ids.shuffle(&mut rng::stream(seed, &[rng::label("dataset-split")]));
    let n = ids.len() as f64;
    let count = |r: f64| (n * r + 1e-9).floor() as usize;
    let (n_val, n_test) = (count(ratios[1]), count(ratios[2]));
    let test_ids = ids.split_off(ids.len() - n_test);
    let val_ids = ids.split_off(ids.len() - n_val);
    Ok(DatasetSplit {
        ratios,
        seed,
        train_ids: ids,
        val_ids,
        test_ids,
    })
}

impl DatasetSplit {
    /// Split containing `id`; tile ids resolve through their parent scene.
    pub fn split_of(&self, id: &str) -> Option<SplitName> {
        let p = parent_id(id);
        let has = |v: &[String]| v.iter().any(|s| s == id || s == p);
        if has(&self.train_ids) {
            Some(SplitName::Train)
        } else if has(&self.val_ids) {
            Some(SplitName::Val)
        } else if has(&self.test_ids) {
            Some(SplitName::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, split: SplitName) -> &[String] {
        match split {
            SplitName::Train => &self.train_ids,
            SplitName::Val => &self.val_ids,
            SplitName::Test => &self.test_ids,
        }
    }

    /// Replaces scene ids by the tile ids derived from them, keeping each tile
    /// in its parent's split.
    pub fn expand_to_tiles(&self, tile_ids: &[String]) -> DatasetSplit {
        let pick = |split: SplitName| -> Vec<String> {
            tile_ids
                .iter()
                .filter(|t| self.split_of(t) == Some(split))
                .cloned()
                .collect()
        };
        DatasetSplit {
            ratios: self.ratios,
            seed: self.seed,
            train_ids: pick(SplitName::Train),
            val_ids: pick(SplitName::Val),
            test_ids: pick(SplitName::Test),
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (tag, ids) in [("train", &self.train_ids), ("val", &self.val_ids), ("test", &self.test_ids)] {
            h.update(tag.as_bytes());
            for id in ids {
                h.update(id.as_bytes());
                h.update([0]);
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tiling::tile_id;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("scene-{i:06}")).collect()
    }

    #[test]
    fn ten_scenes_split_seven_two_one() {
        let s = split_dataset(&ids(10), [0.7, 0.2, 0.1], 0).unwrap();
        assert_eq!((s.train_ids.len(), s.val_ids.len(), s.test_ids.len()), (7, 2, 1));
    }

    #[test]
    fn remainder_goes_to_train() {
        let s = split_dataset(&ids(52222), [0.7, 0.2, 0.1], 3).unwrap();
        assert_eq!((s.train_ids.len(), s.val_ids.len(), s.test_ids.len()), (36556, 10444, 5222));
    }

    #[test]
    fn deterministic_and_disjoint() {
        let all = ids(97);
        let a = split_dataset(&all, [0.7, 0.2, 0.1], 11).unwrap();
        let b = split_dataset(&all, [0.7, 0.2, 0.1], 11).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&all, [0.7, 0.2, 0.1], 12).unwrap();
        assert_ne!(a.train_ids, c.train_ids);
        let mut union: Vec<&String> = a.train_ids.iter().chain(&a.val_ids).chain(&a.test_ids).collect();
        union.sort();
        union.dedup();
        assert_eq!(union.len(), all.len());
    }

    #[test]
    fn tiles_follow_their_parent() {
        let s = split_dataset(&ids(20), [0.5, 0.25, 0.25], 1).unwrap();
        let tiles: Vec<String> = ids(20)
            .iter()
            .flat_map(|p| [tile_id(p, 0, 0), tile_id(p, 0, 64)])
            .collect();
        let t = s.expand_to_tiles(&tiles);
        assert_eq!(t.train_ids.len() + t.val_ids.len() + t.test_ids.len(), 40);
        for id in &t.val_ids {
            assert_eq!(s.split_of(parent_id(id)), Some(SplitName::Val));
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(split_dataset(&[], [0.7, 0.2, 0.1], 0).is_err());
        assert!(split_dataset(&ids(3), [0.7, 0.2, 0.2], 0).is_err());
    }
}
