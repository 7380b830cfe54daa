use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{layer_scores, select, ClassActivationMatrix, ClassMeanAccumulator, SelectionMethod};
use crate::error::{Error, Result};
use crate::ingest::{DatasetSplit, DumpReader, ImageRecords, LayerSchema};
use crate::tensor::FilterKey;

pub const TAG_STORE_VERSION: u32 = 1;

/// Per-filter scores of one image, indexed `[layer][filter]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub image_id: u32,
    pub class_label: u32,
    pub layers: Vec<Vec<f64>>,
}

/// Cached per-image filter scores, sorted by image id. Computing these is
/// the expensive part; tagging and evaluation for any method reuse them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub layers: Vec<LayerSchema>,
    pub images: Vec<ImageScores>,
}

impl ScoreTable {
    pub fn get(&self, image_id: u32) -> Option<&ImageScores> {
        self.images
            .binary_search_by_key(&image_id, |s| s.image_id)
            .ok()
            .map(|i| &self.images[i])
    }

    /// Class means per layer, folded in image-id order.
    pub fn class_means(&self) -> Result<Vec<ClassActivationMatrix>> {
        let mut acc = ClassMeanAccumulator::new(&self.layers);
        for img in &self.images {
            for (layer, scores) in self.layers.iter().zip(&img.layers) {
                acc.add_layer(img.class_label, layer.layer_id, scores)?;
            }
        }
        Ok(acc.finish())
    }
}

pub(crate) fn score_image(img: &ImageRecords, layers: &[LayerSchema]) -> Result<ImageScores> {
    let per_layer = layers
        .iter()
        .map(|l| {
            let rec = img.layer(l.layer_id).ok_or(Error::IncompleteDump {
                image_id: img.image_id,
                layer_id: l.layer_id,
            })?;
            layer_scores(&rec.feature_maps)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageScores {
        image_id: img.image_id,
        class_label: img.class_label,
        layers: per_layer,
    })
}

/// Scores the listed images. Images are read in batches of `threads`, scored
/// in parallel, and stored in id order, so the table does not depend on the
/// thread count.
pub fn score_images(
    reader: &DumpReader,
    ids: &BTreeSet<u32>,
    threads: usize,
) -> Result<ScoreTable> {
    let known: BTreeSet<u32> = reader.images().iter().map(|e| e.image_id).collect();
    if let Some(missing) = ids.difference(&known).next() {
        return Err(Error::Data(format!("image {missing} is not in the dump")));
    }
    let layers = reader.layers().to_vec();
    let pool = crate::thread_pool(threads)?;
    let batch_len = pool.current_num_threads().max(1);
    let mut images = Vec::with_capacity(ids.len());
    let mut stream = reader.records_for(ids).peekable();
    while stream.peek().is_some() {
        let batch: Vec<ImageRecords> = stream.by_ref().take(batch_len).collect::<Result<_>>()?;
        let scored: Vec<ImageScores> = pool.install(|| {
            batch
                .par_iter()
                .map(|img| score_image(img, &layers))
                .collect::<Result<_>>()
        })?;
        images.extend(scored);
    }
    Ok(ScoreTable { layers, images })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dump_id: String,
    pub seed: u64,
    pub split_fraction: f64,
    pub model_name: String,
    pub tagging_images: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tag {
    pub class: u32,
    /// Class-mean score of the filter for this class.
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTags {
    pub filter_index: u32,
    /// Sorted by score descending, then class ascending.
    pub tags: Vec<Tag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTags {
    pub layer_id: u16,
    pub filters: Vec<FilterTags>,
}

/// Filter -> tagged classes, the persisted result of tagging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagStore {
    pub format_version: u32,
    pub method: SelectionMethod,
    pub provenance: Provenance,
    pub classes: Vec<String>,
    pub layers: Vec<LayerTags>,
}

fn tag_order(a: &Tag, b: &Tag) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.class.cmp(&b.class))
}

impl TagStore {
    /// Selects filters per class and layer, then inverts the selection into
    /// per-filter tag lists.
    pub fn from_matrices(
        matrices: &[ClassActivationMatrix],
        method: SelectionMethod,
        provenance: Provenance,
        classes: Vec<String>,
    ) -> Result<Self> {
        method.validate()?;
        let mut layers = Vec::with_capacity(matrices.len());
        for m in matrices {
            let selection = select(m, method)?;
            let mut filters: Vec<FilterTags> = (0..m.filter_count as u32)
                .map(|filter_index| FilterTags {
                    filter_index,
                    tags: Vec::new(),
                })
                .collect();
            for (&class, picked) in &selection.per_class {
                let row = m.row(class).expect("selection rows come from the matrix");
                for &f in picked {
                    filters[f].tags.push(Tag {
                        class,
                        score: row[f] as f32,
                    });
                }
            }
            for f in &mut filters {
                f.tags.sort_by(tag_order);
            }
            layers.push(LayerTags {
                layer_id: m.layer_id,
                filters,
            });
        }
        Ok(Self {
            format_version: TAG_STORE_VERSION,
            method,
            provenance,
            classes,
            layers,
        })
    }

    /// Builds a store from cached tagging-set scores.
    pub fn from_scores(
        table: &ScoreTable,
        method: SelectionMethod,
        provenance: Provenance,
        classes: Vec<String>,
    ) -> Result<Self> {
        Self::from_matrices(&table.class_means()?, method, provenance, classes)
    }

    pub fn tags(&self, key: FilterKey) -> Result<&[Tag]> {
        self.layers
            .get(key.layer_id as usize)
            .filter(|l| l.layer_id == key.layer_id)
            .and_then(|l| l.filters.get(key.filter_index as usize))
            .map(|f| f.tags.as_slice())
            .ok_or_else(|| Error::SchemaMismatch(format!("filter {key} is not in the tag store")))
    }

    pub fn class_name(&self, class: u32) -> &str {
        self.classes.get(class as usize).map_or("?", String::as_str)
    }

    /// Filters tagged with `class`, in (layer, filter) order.
    pub fn filters_tagged_with(&self, class: u32) -> Vec<FilterKey> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.filters
                    .iter()
                    .filter(move |f| f.tags.iter().any(|t| t.class == class))
                    .map(move |f| FilterKey::new(l.layer_id, f.filter_index))
            })
            .collect()
    }

    /// Per layer: (layer id, filters with at least one tag, total tags).
    pub fn tag_counts(&self) -> Vec<(u16, usize, usize)> {
        self.layers
            .iter()
            .map(|l| {
                let tagged = l.filters.iter().filter(|f| !f.tags.is_empty()).count();
                let total = l.filters.iter().map(|f| f.tags.len()).sum();
                (l.layer_id, tagged, total)
            })
            .collect()
    }

    /// Checks ordering and uniqueness of every tag list.
    pub fn check(&self) -> Result<()> {
        if self.format_version != TAG_STORE_VERSION {
            return Err(Error::parse(
                "tag store",
                format!("unsupported format_version {}", self.format_version),
            ));
        }
        self.method.validate()?;
        for (i, l) in self.layers.iter().enumerate() {
            if l.layer_id as usize != i {
                return Err(Error::parse(
                    "tag store",
                    format!("layer {i} has id {}", l.layer_id),
                ));
            }
            for (j, f) in l.filters.iter().enumerate() {
                if f.filter_index as usize != j {
                    return Err(Error::parse(
                        "tag store",
                        format!("layer {i} filter {j} has index {}", f.filter_index),
                    ));
                }
                if f.tags
                    .windows(2)
                    .any(|w| tag_order(&w[0], &w[1]) != std::cmp::Ordering::Less)
                {
                    return Err(Error::parse(
                        "tag store",
                        format!("tags of L{i}/F{j} are unsorted or repeat a class"),
                    ));
                }
                let mut classes: Vec<u32> = f.tags.iter().map(|t| t.class).collect();
                classes.sort_unstable();
                if classes.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::parse(
                        "tag store",
                        format!("L{i}/F{j} repeats a class"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let store: Self =
            serde_json::from_str(s).map_err(|e| Error::parse("tag store", e.to_string()))?;
        store.check()?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Scores the tagging side of `split`, averages per class and selects.
pub fn build_tag_store(
    reader: &DumpReader,
    split: &DatasetSplit,
    method: SelectionMethod,
    threads: usize,
) -> Result<TagStore> {
    method.validate()?;
    let ids = split.tagging_ids();
    let table = score_images(reader, &ids, threads)?;
    let provenance = Provenance {
        dump_id: reader.dump_id().to_owned(),
        seed: split.seed,
        split_fraction: split.fraction,
        model_name: reader.manifest().model_name.clone(),
        tagging_images: ids.len(),
    };
    TagStore::from_scores(&table, method, provenance, reader.classes().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{split_dataset, write_dump, ActivationRecord, DumpSchema};
    use crate::tensor::{Shape3, Tensor3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn provenance() -> Provenance {
        Provenance {
            dump_id: "d".into(),
            seed: 1,
            split_fraction: 0.8,
            model_name: "m".into(),
            tagging_images: 1,
        }
    }

    fn write_random_dump(
        dir: &Path,
        classes: usize,
        images: u32,
        layers: &[(usize, usize)],
    ) -> DumpSchema {
        let schema = DumpSchema {
            model_name: "rand".into(),
            classes: (0..classes).map(|c| format!("c{c}")).collect(),
            layers: layers
                .iter()
                .enumerate()
                .map(|(i, &(f, side))| LayerSchema {
                    layer_id: i as u16,
                    filter_count: f,
                    height: side,
                    width: side,
                })
                .collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut recs = Vec::new();
        for id in 0..images {
            let label = id % classes as u32;
            for l in &schema.layers {
                recs.push(ActivationRecord {
                    image_id: id,
                    class_label: label,
                    layer_id: l.layer_id,
                    feature_maps: Tensor3::from_fn(l.shape(), |_, _, _| {
                        rng.random_range(0.0f32..3.0)
                    })
                    .unwrap(),
                });
            }
        }
        write_dump(dir, schema.clone(), recs).unwrap();
        schema
    }

    #[test]
    fn single_class_tags_only_that_class() {
        let m = ClassActivationMatrix::from_rows(0, &[(2, vec![0.3, 0.1, 0.6])]).unwrap();
        for k in 1..4 {
            let s = TagStore::from_matrices(
                std::slice::from_ref(&m),
                SelectionMethod::KBest { k },
                provenance(),
                vec![],
            )
            .unwrap();
            let tagged: Vec<&FilterTags> = s.layers[0]
                .filters
                .iter()
                .filter(|f| !f.tags.is_empty())
                .collect();
            assert_eq!(tagged.len(), k);
            assert!(tagged
                .iter()
                .all(|f| f.tags.len() == 1 && f.tags[0].class == 2));
        }
    }

    #[test]
    fn inversion_and_ordering() {
        let m = ClassActivationMatrix::from_rows(
            0,
            &[
                (0, vec![0.9, 0.1, 0.5]),
                (1, vec![0.8, 0.7, 0.2]),
                (2, vec![0.9, 0.0, 0.95]),
            ],
        )
        .unwrap();
        let s =
            TagStore::from_matrices(&[m], SelectionMethod::KBest { k: 1 }, provenance(), vec![])
                .unwrap();
        s.check().unwrap();
        let f0: Vec<u32> = s.layers[0].filters[0]
            .tags
            .iter()
            .map(|t| t.class)
            .collect();
        // class 0 (0.9) and class 1 (0.8) pick filter 0; class 2 picks filter 2
        assert_eq!(f0, vec![0, 1]);
        assert!(s.layers[0].filters[1].tags.is_empty());
        assert_eq!(
            s.layers[0].filters[2].tags,
            vec![Tag {
                class: 2,
                score: 0.95
            }]
        );
        assert_eq!(s.filters_tagged_with(2), vec![FilterKey::new(0, 2)]);
        assert!(matches!(
            s.tags(FilterKey::new(0, 3)),
            Err(Error::SchemaMismatch(_))
        ));
        assert!(matches!(
            s.tags(FilterKey::new(1, 0)),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn equal_scores_order_by_class() {
        let m = ClassActivationMatrix::from_rows(0, &[(4, vec![0.5]), (1, vec![0.5])]).unwrap();
        let s =
            TagStore::from_matrices(&[m], SelectionMethod::KBest { k: 1 }, provenance(), vec![])
                .unwrap();
        let classes: Vec<u32> = s.layers[0].filters[0]
            .tags
            .iter()
            .map(|t| t.class)
            .collect();
        assert_eq!(classes, vec![1, 4]);
    }

    #[test]
    fn json_round_trip_and_score_format() {
        let m = ClassActivationMatrix::from_rows(0, &[(0, vec![0.1, 1.0 / 3.0])]).unwrap();
        let s = TagStore::from_matrices(
            &[m],
            SelectionMethod::QQuantile { q: 0.5 },
            provenance(),
            vec!["a".into()],
        )
        .unwrap();
        let json = s.to_json().unwrap();
        assert!(json.contains("\"score\": 0.33333334"), "{json}");
        assert_eq!(TagStore::from_json(&json).unwrap(), s);
    }

    #[test]
    fn load_rejects_unsorted_tags() {
        let m = ClassActivationMatrix::from_rows(0, &[(0, vec![0.9]), (1, vec![0.2])]).unwrap();
        let mut s =
            TagStore::from_matrices(&[m], SelectionMethod::KBest { k: 1 }, provenance(), vec![])
                .unwrap();
        s.layers[0].filters[0].tags.reverse();
        let json = serde_json::to_string(&s).unwrap();
        assert!(TagStore::from_json(&json).is_err());
    }

    #[test]
    fn pipeline_is_deterministic_across_threads() {
        let dir = tempfile::tempdir().unwrap();
        write_random_dump(dir.path(), 3, 30, &[(6, 4), (4, 2)]);
        let reader = DumpReader::open(dir.path()).unwrap();
        let split = split_dataset(&reader.labels(), 3, 0.8, 5).unwrap();
        let method = SelectionMethod::QQuantile { q: 0.5 };
        let a = build_tag_store(&reader, &split, method, 1)
            .unwrap()
            .to_json()
            .unwrap();
        let b = build_tag_store(&reader, &split, method, 4)
            .unwrap()
            .to_json()
            .unwrap();
        let c = build_tag_store(&reader, &split, method, 1)
            .unwrap()
            .to_json()
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        let store = TagStore::from_json(&a).unwrap();
        assert_eq!(store.provenance.tagging_images, split.tagging_ids().len());
        // q=0.5 of 6 filters -> 3 per class; 3 classes -> 9 tags on layer 0
        assert_eq!(store.tag_counts()[0].2, 9);
        assert_eq!(store.tag_counts()[1].2, 6);
    }

    #[test]
    fn incomplete_dump_names_image_and_layer() {
        let dir = tempfile::tempdir().unwrap();
        let schema = DumpSchema {
            model_name: "m".into(),
            classes: vec!["a".into()],
            layers: vec![
                LayerSchema {
                    layer_id: 0,
                    filter_count: 1,
                    height: 1,
                    width: 1,
                },
                LayerSchema {
                    layer_id: 1,
                    filter_count: 1,
                    height: 1,
                    width: 1,
                },
            ],
        };
        let rec = |id, layer| ActivationRecord {
            image_id: id,
            class_label: 0,
            layer_id: layer,
            feature_maps: Tensor3::zeros(Shape3::new(1, 1, 1)),
        };
        write_dump(
            dir.path(),
            schema,
            [rec(0, 0), rec(0, 1), rec(1, 0), rec(2, 0), rec(2, 1)],
        )
        .unwrap();
        let reader = DumpReader::open(dir.path()).unwrap();
        let split = DatasetSplit {
            seed: 0,
            fraction: 0.8,
            tagging: [(0, vec![0, 1, 2])].into(),
            test: [(0, vec![])].into(),
            warnings: vec![],
        };
        let err = build_tag_store(&reader, &split, SelectionMethod::KBest { k: 1 }, 1).unwrap_err();
        assert!(
            matches!(
                err,
                Error::IncompleteDump {
                    image_id: 1,
                    layer_id: 1
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn all_zero_layers_tag_without_crashing() {
        let dir = tempfile::tempdir().unwrap();
        let schema = DumpSchema {
            model_name: "m".into(),
            classes: vec!["a".into(), "b".into()],
            layers: vec![LayerSchema {
                layer_id: 0,
                filter_count: 3,
                height: 2,
                width: 2,
            }],
        };
        let recs = (0..6).map(|id| ActivationRecord {
            image_id: id,
            class_label: id % 2,
            layer_id: 0,
            feature_maps: Tensor3::zeros(Shape3::new(3, 2, 2)),
        });
        write_dump(dir.path(), schema, recs).unwrap();
        let reader = DumpReader::open(dir.path()).unwrap();
        let split = split_dataset(&reader.labels(), 2, 0.8, 0).unwrap();
        let store = build_tag_store(&reader, &split, SelectionMethod::KBest { k: 1 }, 2).unwrap();
        // every z is 0, so the tie rule sends both classes to filter 0
        assert_eq!(store.layers[0].filters[0].tags.len(), 2);
        assert!(store.layers[0].filters[0]
            .tags
            .iter()
            .all(|t| t.score == 0.0));
    }
}
