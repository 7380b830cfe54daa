//! Explanations of single classifications and their evaluation.
//!
//! An image is explained by the tags of its most activated filters. The
//! filters are picked per layer with the same k-best or q-quantile rule used
//! for tagging, and their tags are counted. Classes carried by more
//! activated filters rank higher; summed tag scores and then the class id
//! break ties.

mod evaluate;
mod report;
mod stats;
mod sweep;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ImageRecords, LayerSchema};
use crate::tagging::{score_image, top_filters, ImageScores, SelectionMethod, TagStore};
use crate::tensor::FilterKey;

pub use evaluate::{
    check_contamination, evaluate, evaluate_scores, ClassHits, EvalConfig, HitsReport,
};
pub use report::{error_report, ClassEvidence, ErrorReport, HitAt, NamedTag, SharedTag};
pub use stats::{average_ranks, pearson, spearman};
pub use sweep::{rows_to_csv, sweep, SweepRow, SweepTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivatedFilter {
    pub key: FilterKey,
    /// Mean scaled activation of the filter's map for this image.
    pub score: f64,
}

/// Activated filters of one layer, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActivation {
    pub layer_id: u16,
    pub filters: Vec<ActivatedFilter>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTag {
    pub class: u32,
    /// Number of activated filters carrying the tag.
    pub frequency: u32,
    /// Sum of the tag's scores over those filters.
    pub score_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub image_id: u32,
    pub true_class: u32,
    pub predicted_class: Option<u32>,
    pub activated: Vec<LayerActivation>,
    pub ranked_tags: Vec<RankedTag>,
}

impl Explanation {
    /// 1-based position of `class` in the ranking.
    pub fn rank_of(&self, class: u32) -> Option<usize> {
        self.ranked_tags
            .iter()
            .position(|t| t.class == class)
            .map(|i| i + 1)
    }

    pub fn tag(&self, class: u32) -> Option<&RankedTag> {
        self.ranked_tags.iter().find(|t| t.class == class)
    }

    pub fn activated_keys(&self) -> impl Iterator<Item = FilterKey> + '_ {
        self.activated
            .iter()
            .flat_map(|l| l.filters.iter().map(|f| f.key))
    }

    /// Plain-text rendering with class names taken from `store`.
    pub fn to_text(&self, store: &TagStore) -> String {
        let mut out = format!(
            "image {}: true class {}",
            self.image_id,
            store.class_name(self.true_class)
        );
        if let Some(p) = self.predicted_class {
            out.push_str(&format!(", predicted {}", store.class_name(p)));
        }
        out.push('\n');
        for l in &self.activated {
            let keys: Vec<String> = l
                .filters
                .iter()
                .map(|f| format!("{}({:.4})", f.key, f.score))
                .collect();
            out.push_str(&format!(
                "  layer {} activated: {}\n",
                l.layer_id,
                keys.join(" ")
            ));
        }
        for (i, t) in self.ranked_tags.iter().enumerate() {
            out.push_str(&format!(
                "  {:>3}. {} freq={} score={:.6}\n",
                i + 1,
                store.class_name(t.class),
                t.frequency,
                t.score_sum
            ));
        }
        out
    }
}

fn pick(layer_id: u16, scores: &[f64], method: SelectionMethod) -> LayerActivation {
    LayerActivation {
        layer_id,
        filters: top_filters(scores, method.count(scores.len()))
            .into_iter()
            .map(|i| ActivatedFilter {
                key: FilterKey::new(layer_id, i as u32),
                score: scores[i],
            })
            .collect(),
    }
}

/// Scores each layer of `image` and keeps its most activated filters.
pub fn activated_filters(
    image: &ImageRecords,
    layers: &[LayerSchema],
    method: SelectionMethod,
) -> Result<Vec<LayerActivation>> {
    activated_from_scores(&score_image(image, layers)?, layers, method)
}

/// Same as [`activated_filters`] from precomputed scores.
pub fn activated_from_scores(
    scores: &ImageScores,
    layers: &[LayerSchema],
    method: SelectionMethod,
) -> Result<Vec<LayerActivation>> {
    method.validate()?;
    if scores.layers.len() != layers.len() {
        return Err(Error::IncompleteDump {
            image_id: scores.image_id,
            layer_id: scores.layers.len() as u16,
        });
    }
    Ok(layers
        .iter()
        .zip(&scores.layers)
        .map(|(l, s)| pick(l.layer_id, s, method))
        .collect())
}

/// Counts the tags of every activated filter across all layers.
pub fn explain_image(
    image_id: u32,
    true_class: u32,
    predicted_class: Option<u32>,
    activated: Vec<LayerActivation>,
    store: &TagStore,
) -> Result<Explanation> {
    let mut counts: BTreeMap<u32, (u32, f64)> = BTreeMap::new();
    for layer in &activated {
        for f in &layer.filters {
            for t in store.tags(f.key)? {
                let e = counts.entry(t.class).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += f64::from(t.score);
            }
        }
    }
    let mut ranked_tags: Vec<RankedTag> = counts
        .into_iter()
        .map(|(class, (frequency, score_sum))| RankedTag {
            class,
            frequency,
            score_sum,
        })
        .collect();
    ranked_tags.sort_by(|a, b| {
        b.frequency
            .cmp(&a.frequency)
            .then(b.score_sum.total_cmp(&a.score_sum))
            .then(a.class.cmp(&b.class))
    });
    Ok(Explanation {
        image_id,
        true_class,
        predicted_class,
        activated,
        ranked_tags,
    })
}

/// Whether the true class is among the first `n` ranked tags.
pub fn hits_at_n(e: &Explanation, n: usize) -> bool {
    e.ranked_tags
        .iter()
        .take(n)
        .any(|t| t.class == e.true_class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ActivationRecord;
    use crate::tagging::{ClassActivationMatrix, Provenance};
    use crate::tensor::{Shape3, Tensor3};
    use proptest::prelude::*;

    pub(crate) fn store_from(rows: &[(u32, Vec<f64>)], method: SelectionMethod) -> TagStore {
        let m = ClassActivationMatrix::from_rows(0, rows).unwrap();
        let provenance = Provenance {
            dump_id: "d".into(),
            seed: 0,
            split_fraction: 0.8,
            model_name: "m".into(),
            tagging_images: 0,
        };
        TagStore::from_matrices(&[m], method, provenance, vec![]).unwrap()
    }

    fn act(filters: &[(u32, f64)]) -> Vec<LayerActivation> {
        vec![LayerActivation {
            layer_id: 0,
            filters: filters
                .iter()
                .map(|&(i, score)| ActivatedFilter {
                    key: FilterKey::new(0, i),
                    score,
                })
                .collect(),
        }]
    }

    fn image_with_scores(maps: Vec<Vec<f32>>) -> (ImageRecords, Vec<LayerSchema>) {
        let n = maps.len();
        let len = maps[0].len();
        let t = Tensor3::new(Shape3::new(n, 1, len), maps.concat()).unwrap();
        let schema = vec![LayerSchema {
            layer_id: 0,
            filter_count: n,
            height: 1,
            width: len,
        }];
        let rec = ActivationRecord {
            image_id: 7,
            class_label: 0,
            layer_id: 0,
            feature_maps: t,
        };
        (ImageRecords::from_records(7, 0, vec![rec]), schema)
    }

    #[test]
    fn single_filter_layer_always_selected() {
        let (img, schema) = image_with_scores(vec![vec![0.3, 0.1]]);
        for m in [
            SelectionMethod::KBest { k: 3 },
            SelectionMethod::QQuantile { q: 0.1 },
        ] {
            let a = activated_filters(&img, &schema, m).unwrap();
            assert_eq!(a[0].filters.len(), 1);
        }
    }

    #[test]
    fn top_two_of_three() {
        // maps with min 0 and max 1 across the layer give scores 0.9, 0.1, 0.5
        let (img, schema) = image_with_scores(vec![vec![0.8, 1.0], vec![0.0, 0.2], vec![0.5, 0.5]]);
        let a = activated_filters(&img, &schema, SelectionMethod::KBest { k: 2 }).unwrap();
        let keys: Vec<u32> = a[0].filters.iter().map(|f| f.key.filter_index).collect();
        assert_eq!(keys, vec![0, 2]);
        assert!((a[0].filters[0].score - 0.9).abs() < 1e-6);
    }

    #[test]
    fn missing_layer_is_incomplete() {
        let (img, mut schema) = image_with_scores(vec![vec![0.1]]);
        schema.push(LayerSchema {
            layer_id: 1,
            filter_count: 1,
            height: 1,
            width: 1,
        });
        let err = activated_filters(&img, &schema, SelectionMethod::KBest { k: 1 }).unwrap_err();
        assert!(matches!(
            err,
            Error::IncompleteDump {
                image_id: 7,
                layer_id: 1
            }
        ));
    }

    #[test]
    fn singleton_and_frequency_ranking() {
        let k1 = SelectionMethod::KBest { k: 1 };
        // class 0 tags filter 0, class 1 tags filter 1, class 2 tags filter 0
        let store = store_from(
            &[
                (0, vec![0.9, 0.1]),
                (1, vec![0.2, 0.7]),
                (2, vec![0.6, 0.5]),
            ],
            k1,
        );
        let e = explain_image(1, 1, None, act(&[(1, 0.5)]), &store).unwrap();
        assert_eq!(
            e.ranked_tags,
            vec![RankedTag {
                class: 1,
                frequency: 1,
                score_sum: f64::from(0.7f32)
            }]
        );

        let store = store_from(
            &[(0, vec![0.9, 0.8]), (1, vec![0.1, 0.7])],
            SelectionMethod::KBest { k: 2 },
        );
        // filter 0 carries {0, 1}, filter 1 carries {0, 1}; restrict to q such that filter 1 only has 0
        let e = explain_image(1, 0, None, act(&[(0, 0.5), (1, 0.4)]), &store).unwrap();
        assert_eq!(e.ranked_tags[0].class, 0);
        assert_eq!(e.ranked_tags[0].frequency, 2);
        assert!(hits_at_n(&e, 1));
        assert_eq!(e.rank_of(1), Some(2));
        assert_eq!(e.rank_of(5), None);
    }

    #[test]
    fn frequency_beats_score() {
        // filter 0 -> {A=0, B=1}, filter 1 -> {A}
        let store = store_from(
            &[(0, vec![0.5, 0.6]), (1, vec![0.99, 0.1])],
            SelectionMethod::KBest { k: 1 },
        );
        let mut store = store;
        store.layers[0].filters[0].tags.push(crate::tagging::Tag {
            class: 0,
            score: 0.5,
        });
        store.layers[0].filters[0]
            .tags
            .sort_by(|a, b| b.score.total_cmp(&a.score));
        let e = explain_image(0, 1, None, act(&[(0, 1.0), (1, 1.0)]), &store).unwrap();
        assert_eq!(e.ranked_tags[0].class, 0);
        assert_eq!(e.ranked_tags[0].frequency, 2);
        assert_eq!(e.ranked_tags[1].class, 1);
        assert!(!hits_at_n(&e, 1));
        assert!(hits_at_n(&e, 2));
    }

    #[test]
    fn absent_true_class_never_hits() {
        let store = store_from(&[(0, vec![0.5])], SelectionMethod::KBest { k: 1 });
        let e = explain_image(0, 3, None, act(&[(0, 1.0)]), &store).unwrap();
        for n in 1..5 {
            assert!(!hits_at_n(&e, n));
        }
    }

    #[test]
    fn unknown_filter_is_schema_mismatch() {
        let store = store_from(&[(0, vec![0.5])], SelectionMethod::KBest { k: 1 });
        let err = explain_image(0, 0, None, act(&[(4, 1.0)]), &store).unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch(_)));
    }

    #[test]
    fn json_round_trip() {
        let store = store_from(
            &[(0, vec![0.5, 0.25]), (1, vec![0.1, 0.3])],
            SelectionMethod::KBest { k: 1 },
        );
        let e = explain_image(
            3,
            0,
            Some(1),
            act(&[(0, 0.1 + 0.2), (1, 1.0 / 3.0)]),
            &store,
        )
        .unwrap();
        let back: Explanation = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        assert_eq!(back, e);
    }

    /// Oracle: quadratic scan of the activated filters for each class.
    fn ranking_oracle(store: &TagStore, keys: &[FilterKey]) -> Vec<(u32, u32)> {
        let classes: Vec<u32> = (0..8).collect();
        let mut out: Vec<(u32, u32, f64)> = classes
            .iter()
            .filter_map(|&c| {
                let mut freq = 0;
                let mut sum = 0.0;
                for k in keys {
                    for t in store.tags(*k).unwrap() {
                        if t.class == c {
                            freq += 1;
                            sum += f64::from(t.score);
                        }
                    }
                }
                (freq > 0).then_some((c, freq, sum))
            })
            .collect();
        out.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then(b.2.partial_cmp(&a.2).unwrap())
                .then(a.0.cmp(&b.0))
        });
        out.into_iter().map(|(c, f, _)| (c, f)).collect()
    }

    proptest! {
        #[test]
        fn ranking_matches_oracle_and_hits_are_monotone(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..8),
            image in prop::collection::vec(0.0f64..1.0, 6),
            k in 1usize..4,
            ek in 1usize..6,
            true_class in 0u32..8,
        ) {
            let rows: Vec<(u32, Vec<f64>)> = rows.into_iter().enumerate().map(|(c, r)| (c as u32, r)).collect();
            let store = store_from(&rows, SelectionMethod::KBest { k });
            let layers = [LayerSchema { layer_id: 0, filter_count: 6, height: 1, width: 1 }];
            let scores = ImageScores { image_id: 0, class_label: true_class, layers: vec![image] };
            let a = activated_from_scores(&scores, &layers, SelectionMethod::KBest { k: ek }).unwrap();
            let keys: Vec<FilterKey> = a[0].filters.iter().map(|f| f.key).collect();
            let e = explain_image(0, true_class, None, a, &store).unwrap();
            let got: Vec<(u32, u32)> = e.ranked_tags.iter().map(|t| (t.class, t.frequency)).collect();
            prop_assert_eq!(got, ranking_oracle(&store, &keys));
            for n in 1..10 {
                prop_assert!(!hits_at_n(&e, n) || hits_at_n(&e, n + 1));
            }
            // enlarging the explanation-time selection never lowers a frequency
            let bigger = activated_from_scores(&scores, &layers, SelectionMethod::KBest { k: ek + 1 }).unwrap();
            let e2 = explain_image(0, true_class, None, bigger, &store).unwrap();
            for t in &e.ranked_tags {
                prop_assert!(e2.tag(t.class).unwrap().frequency >= t.frequency);
            }
        }
    }
}
