//! Filter tagging.
//!
//! For every image and convolutional layer the raw feature maps are min-max
//! scaled to `[0, 1]` jointly across all filters of that layer, then each
//! filter gets a per-image score: the mean of its scaled feature map. Those
//! scores are averaged per class into a class x filter matrix, and each
//! class tags the filters it activates most, either a fixed number per layer
//! (k-best) or a fraction of the layer's filters (q-quantile).

mod select;
mod store;

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::ingest::{ActivationRecord, LayerSchema};
use crate::tensor::{mean, FilterKey, Tensor3};

pub use select::{
    quantile_count, select, select_k_best, select_q_quantile, top_filters, LayerSelection,
    SelectionMethod,
};
pub(crate) use store::score_image;
pub use store::{
    build_tag_store, score_images, FilterTags, ImageScores, LayerTags, Provenance, ScoreTable, Tag,
    TagStore, TAG_STORE_VERSION,
};

/// One image's layer output after joint min-max scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledLayerActivations {
    pub image_id: u32,
    pub layer_id: u16,
    /// Same shape as the raw output; every value in `[0, 1]`.
    pub maps: Tensor3,
}

/// Mean scaled activation of one filter's feature map for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterImageScore {
    pub image_id: u32,
    pub key: FilterKey,
    pub score: f64,
}

/// Min-max scales all values of `raw` together. A constant input maps to
/// all zeros.
pub fn scale_tensor(raw: &Tensor3) -> Result<Tensor3> {
    if let Some(v) = raw.values().iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite activation {v}")));
    }
    let Some((lo, hi)) = raw.min_max() else {
        return Ok(raw.clone());
    };
    if lo == hi {
        return Ok(Tensor3::zeros(raw.shape()));
    }
    let (lo, span) = (f64::from(lo), f64::from(hi) - f64::from(lo));
    raw.map(|v| ((f64::from(v) - lo) / span) as f32)
}

pub fn scale_layer(record: &ActivationRecord) -> Result<ScaledLayerActivations> {
    Ok(ScaledLayerActivations {
        image_id: record.image_id,
        layer_id: record.layer_id,
        maps: scale_tensor(&record.feature_maps)?,
    })
}

/// Mean of filter `filter`'s scaled feature map.
pub fn feature_map_score(s: &ScaledLayerActivations, filter: usize) -> Result<FilterImageScore> {
    let map = s.maps.channel_slice(filter)?;
    if map.is_empty() {
        return Err(Error::Domain(format!(
            "filter {filter} of layer {} has an empty feature map",
            s.layer_id
        )));
    }
    Ok(FilterImageScore {
        image_id: s.image_id,
        key: FilterKey::new(s.layer_id, filter as u32),
        score: mean(map)?,
    })
}

/// Scores of every filter of a raw layer output, in filter order.
pub fn layer_scores(raw: &Tensor3) -> Result<Vec<f64>> {
    let scaled = scale_tensor(raw)?;
    if scaled.shape().plane() == 0 {
        return Err(Error::Domain("layer has empty feature maps".into()));
    }
    (0..scaled.channels())
        .map(|c| mean(scaled.channel_slice(c)?))
        .collect()
}

/// Per-layer matrix of class-mean filter scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassActivationMatrix {
    pub layer_id: u16,
    pub filter_count: usize,
    /// Row labels in ascending order; only classes with images appear.
    pub classes: Vec<u32>,
    /// Images contributing to each row.
    pub counts: Vec<usize>,
    /// `classes.len() x filter_count`, row-major.
    pub values: Vec<f64>,
}

impl ClassActivationMatrix {
    pub fn row(&self, class: u32) -> Option<&[f64]> {
        let r = self.classes.binary_search(&class).ok()?;
        Some(&self.values[r * self.filter_count..(r + 1) * self.filter_count])
    }

    pub fn rows(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.classes
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.filter_count.max(1)))
    }

    /// Builds a matrix from explicit rows; handy for tests and tooling.
    pub fn from_rows(layer_id: u16, rows: &[(u32, Vec<f64>)]) -> Result<Self> {
        let filter_count = rows.first().map_or(0, |r| r.1.len());
        let mut sorted: Vec<&(u32, Vec<f64>)> = rows.iter().collect();
        sorted.sort_by_key(|r| r.0);
        if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Data("duplicate class row".into()));
        }
        if sorted.iter().any(|r| r.1.len() != filter_count) {
            return Err(Error::Shape("rows differ in length".into()));
        }
        Ok(Self {
            layer_id,
            filter_count,
            classes: sorted.iter().map(|r| r.0).collect(),
            counts: vec![1; sorted.len()],
            values: sorted.iter().flat_map(|r| r.1.iter().copied()).collect(),
        })
    }
}

#[derive(Debug, Clone, Default)]
struct ClassSums {
    sums: Vec<f64>,
    counts: Vec<u64>,
    images: usize,
}

/// One-pass running sums per (layer, class, filter). Partial accumulators
/// merge by addition; [`finish`](Self::finish) walks everything in
/// (layer, class, filter) order.
#[derive(Debug, Clone)]
pub struct ClassMeanAccumulator {
    layers: Vec<LayerSchema>,
    per_layer: Vec<BTreeMap<u32, ClassSums>>,
}

impl ClassMeanAccumulator {
    pub fn new(layers: &[LayerSchema]) -> Self {
        Self {
            layers: layers.to_vec(),
            per_layer: vec![BTreeMap::new(); layers.len()],
        }
    }

    fn sums(&mut self, layer_id: u16, class: u32) -> Result<&mut ClassSums> {
        let filters = self
            .layers
            .get(layer_id as usize)
            .ok_or_else(|| Error::Schema(format!("unknown layer {layer_id}")))?
            .filter_count;
        let entry = self.per_layer[layer_id as usize]
            .entry(class)
            .or_insert_with(|| ClassSums {
                sums: vec![0.0; filters],
                counts: vec![0; filters],
                images: 0,
            });
        Ok(entry)
    }

    /// Adds one image's scores for every filter of `layer_id`.
    pub fn add_layer(&mut self, class: u32, layer_id: u16, scores: &[f64]) -> Result<()> {
        let s = self.sums(layer_id, class)?;
        if scores.len() != s.sums.len() {
            return Err(Error::Schema(format!(
                "layer {layer_id} has {} filters, got {} scores",
                s.sums.len(),
                scores.len()
            )));
        }
        for ((sum, count), &v) in s.sums.iter_mut().zip(&mut s.counts).zip(scores) {
            *sum += v;
            *count += 1;
        }
        s.images += 1;
        Ok(())
    }

    /// Adds a single (image, filter) score.
    pub fn add_score(&mut self, class: u32, key: FilterKey, score: f64) -> Result<()> {
        let s = self.sums(key.layer_id, class)?;
        let i = key.filter_index as usize;
        if i >= s.sums.len() {
            return Err(Error::Index(format!("filter {key} out of range")));
        }
        s.sums[i] += score;
        s.counts[i] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.layers != other.layers {
            return Err(Error::Schema(
                "cannot merge accumulators over different layers".into(),
            ));
        }
        for (mine, theirs) in self.per_layer.iter_mut().zip(&other.per_layer) {
            for (class, t) in theirs {
                let m = mine.entry(*class).or_insert_with(|| ClassSums {
                    sums: vec![0.0; t.sums.len()],
                    counts: vec![0; t.sums.len()],
                    images: 0,
                });
                for i in 0..t.sums.len() {
                    m.sums[i] += t.sums[i];
                    m.counts[i] += t.counts[i];
                }
                m.images += t.images;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Vec<ClassActivationMatrix> {
        self.layers
            .iter()
            .zip(&self.per_layer)
            .map(|(layer, classes)| {
                let mut m = ClassActivationMatrix {
                    layer_id: layer.layer_id,
                    filter_count: layer.filter_count,
                    classes: Vec::new(),
                    counts: Vec::new(),
                    values: Vec::new(),
                };
                for (&class, s) in classes {
                    if s.counts.iter().all(|&c| c == 0) {
                        continue;
                    }
                    m.classes.push(class);
                    m.counts.push(
                        s.images
                            .max(s.counts.iter().copied().max().unwrap_or(0) as usize),
                    );
                    m.values
                        .extend(s.sums.iter().zip(&s.counts).map(|(&sum, &n)| {
                            if n == 0 {
                                0.0
                            } else {
                                sum / n as f64
                            }
                        }));
                }
                m
            })
            .collect()
    }
}

/// Folds a stream of per-(image, filter) scores into class means per layer.
pub fn accumulate_class_means(
    scores: impl IntoIterator<Item = FilterImageScore>,
    labels: &HashMap<u32, u32>,
    layers: &[LayerSchema],
) -> Result<Vec<ClassActivationMatrix>> {
    let mut acc = ClassMeanAccumulator::new(layers);
    let mut seen = HashSet::new();
    let mut images_per_layer_class: HashSet<(u16, u32, u32)> = HashSet::new();
    for s in scores {
        let class = *labels
            .get(&s.image_id)
            .ok_or_else(|| Error::Data(format!("image {} has no label", s.image_id)))?;
        if !seen.insert((s.image_id, s.key)) {
            return Err(Error::Data(format!(
                "score for image {} filter {} appears twice",
                s.image_id, s.key
            )));
        }
        acc.add_score(class, s.key, s.score)?;
        if images_per_layer_class.insert((s.key.layer_id, class, s.image_id)) {
            acc.sums(s.key.layer_id, class)?.images += 1;
        }
    }
    Ok(acc.finish())
}
