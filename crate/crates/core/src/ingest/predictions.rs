use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sidecar written next to a dump's manifest when the dump came from a
/// forward pass.
pub const PREDICTIONS_FILE: &str = "predictions.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub image_id: u32,
    pub predicted_class: u32,
    /// Softmax output, one entry per class.
    pub probabilities: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub model_name: String,
    /// Sorted by image id.
    pub entries: Vec<PredictionEntry>,
}

impl Predictions {
    pub fn new(model_name: impl Into<String>, mut entries: Vec<PredictionEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.image_id);
        if let Some(w) = entries.windows(2).find(|w| w[0].image_id == w[1].image_id) {
            return Err(Error::Data(format!(
                "prediction for image {} given twice",
                w[0].image_id
            )));
        }
        Ok(Self {
            model_name: model_name.into(),
            entries,
        })
    }

    pub fn get(&self, image_id: u32) -> Option<&PredictionEntry> {
        self.entries
            .binary_search_by_key(&image_id, |e| e.image_id)
            .ok()
            .map(|i| &self.entries[i])
    }

    /// image id -> predicted class.
    pub fn classes(&self) -> BTreeMap<u32, u32> {
        self.entries
            .iter()
            .map(|e| (e.image_id, e.predicted_class))
            .collect()
    }

    pub fn save(&self, dump_dir: impl AsRef<Path>) -> Result<()> {
        let path = dump_dir.as_ref().join(PREDICTIONS_FILE);
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Loads the sidecar if the dump has one.
    pub fn load(dump_dir: impl AsRef<Path>) -> Result<Option<Self>> {
        let path = dump_dir.as_ref().join(PREDICTIONS_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let p: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::parse(PREDICTIONS_FILE, e.to_string()))?;
        Self::new(p.model_name, p.entries).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(Predictions::load(dir.path()).unwrap(), None);
        let p = Predictions::new(
            "m",
            vec![
                PredictionEntry {
                    image_id: 5,
                    predicted_class: 1,
                    probabilities: vec![0.25, 0.75],
                },
                PredictionEntry {
                    image_id: 2,
                    predicted_class: 0,
                    probabilities: vec![0.9, 0.1],
                },
            ],
        )
        .unwrap();
        p.save(dir.path()).unwrap();
        let q = Predictions::load(dir.path()).unwrap().unwrap();
        assert_eq!(q, p);
        assert_eq!(q.get(5).unwrap().predicted_class, 1);
        assert!(q.get(3).is_none());
        assert_eq!(q.classes(), BTreeMap::from([(2, 0), (5, 1)]));
    }

    #[test]
    fn duplicate_entries_rejected() {
        let e = PredictionEntry {
            image_id: 1,
            predicted_class: 0,
            probabilities: vec![1.0],
        };
        assert!(Predictions::new("m", vec![e.clone(), e]).is_err());
    }
}
