use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSide {
    Tagging,
    Test,
}

/// Per-class stratified holdout split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub fraction: f64,
    /// class label -> image ids used to build tags (sorted).
    pub tagging: BTreeMap<u32, Vec<u32>>,
    /// class label -> image ids held out for evaluation (sorted).
    pub test: BTreeMap<u32, Vec<u32>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn side(&self, side: SplitSide) -> &BTreeMap<u32, Vec<u32>> {
        match side {
            SplitSide::Tagging => &self.tagging,
            SplitSide::Test => &self.test,
        }
    }

    pub fn ids(&self, side: SplitSide) -> BTreeSet<u32> {
        self.side(side).values().flatten().copied().collect()
    }

    pub fn tagging_ids(&self) -> BTreeSet<u32> {
        self.ids(SplitSide::Tagging)
    }

    pub fn test_ids(&self) -> BTreeSet<u32> {
        self.ids(SplitSide::Test)
    }
}

/// Number of tagging images for a class of `n`: `fraction * n` rounded half
/// up, clamped to `[1, n - 1]` when `n >= 2`.
pub(crate) fn tagging_count(n: usize, fraction: f64) -> usize {
    match n {
        0 => 0,
        1 => 1,
        _ => {
            // Nudge by a tiny epsilon so 0.8 * 5 style products that land a
            // hair under .5 still round up.
            let raw = (fraction * n as f64 + 0.5 + 1e-9).floor() as usize;
            raw.clamp(1, n - 1)
        }
    }
}

/// Splits `(image_id, class_label)` pairs per class. Each class is shuffled
/// on its own ChaCha stream, so one class's membership does not depend on
/// the others. Labels `>= class_count` are rejected; classes without images
/// are skipped with a warning.
pub fn split_dataset(
    images: &[(u32, u32)],
    class_count: usize,
    fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!(
            "split fraction {fraction} is outside (0, 1)"
        )));
    }
    let mut by_class: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for &(id, label) in images {
        if label as usize >= class_count {
            return Err(Error::Data(format!(
                "image {id} has label {label} but only {class_count} classes exist"
            )));
        }
        if !seen.insert(id) {
            return Err(Error::Data(format!("image {id} appears more than once")));
        }
        by_class.entry(label).or_default().push(id);
    }

    let mut split = DatasetSplit {
        seed,
        fraction,
        tagging: BTreeMap::new(),
        test: BTreeMap::new(),
        warnings: Vec::new(),
    };
    for class in 0..class_count as u32 {
        let Some(mut ids) = by_class.remove(&class) else {
            let msg = format!("class {class} has no images and is ignored");
            log::warn!("{msg}");
            split.warnings.push(msg);
            continue;
        };
        if ids.len() == 1 {
            let msg = format!("class {class} has a single image; its test side is empty");
            log::warn!("{msg}");
            split.warnings.push(msg);
        }
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(class));
        ids.shuffle(&mut rng);
        let k = tagging_count(ids.len(), fraction);
        let mut test = ids.split_off(k);
        ids.sort_unstable();
        test.sort_unstable();
        split.tagging.insert(class, ids);
        split.test.insert(class, test);
    }
    Ok(split)
}
