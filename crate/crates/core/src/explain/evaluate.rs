use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{activated_from_scores, explain_image, hits_at_n, spearman, SweepRow};
use crate::error::{Error, Result};
use crate::ingest::{DatasetSplit, DumpReader, SplitSide};
use crate::tagging::{score_images, ScoreTable, SelectionMethod, TagStore};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Explanation-time selection; `None` reuses the store's method.
    pub method: Option<SelectionMethod>,
    pub n_values: Vec<usize>,
    pub threads: usize,
}

impl EvalConfig {
    pub fn new(n_values: Vec<usize>) -> Self {
        Self {
            method: None,
            n_values,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassHits {
    pub class: u32,
    pub name: String,
    pub total: usize,
    /// One count per entry of `n_values`.
    pub hits: Vec<usize>,
    pub rates: Vec<f64>,
    /// Share of the class's images the model classified correctly.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitsReport {
    pub store_method: SelectionMethod,
    pub explain_method: SelectionMethod,
    pub n_values: Vec<usize>,
    pub total: usize,
    pub hits: Vec<usize>,
    pub rates: Vec<f64>,
    pub per_class: Vec<ClassHits>,
    /// Spearman correlation of per-class hit rate (largest n) and accuracy.
    pub spearman: Option<f64>,
    /// Set when there were no images to evaluate.
    pub empty: bool,
}

fn rate(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

impl HitsReport {
    pub fn rate_at(&self, n: usize) -> Option<f64> {
        self.n_values
            .iter()
            .position(|&m| m == n)
            .map(|i| self.rates[i])
    }

    pub fn class(&self, class: u32) -> Option<&ClassHits> {
        self.per_class.iter().find(|c| c.class == class)
    }

    /// Flat rows: overall (`class = "ALL"`) then per class, for every n.
    pub fn rows(&self) -> Vec<SweepRow> {
        let m = self.store_method;
        let mut rows = Vec::new();
        for (i, &n) in self.n_values.iter().enumerate() {
            rows.push(SweepRow::new(m, n, "ALL", self.hits[i], self.total));
        }
        for c in &self.per_class {
            for (i, &n) in self.n_values.iter().enumerate() {
                rows.push(SweepRow::new(m, n, &c.name, c.hits[i], c.total));
            }
        }
        rows
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "store {}, explained with {}, {} images{}\n",
            self.store_method,
            self.explain_method,
            self.total,
            if self.empty { " (EMPTY)" } else { "" }
        );
        for (i, n) in self.n_values.iter().enumerate() {
            out.push_str(&format!(
                "  Hits@{n}: {}/{} = {:.4}\n",
                self.hits[i], self.total, self.rates[i]
            ));
        }
        for c in &self.per_class {
            let rates: Vec<String> = c.rates.iter().map(|r| format!("{r:.4}")).collect();
            out.push_str(&format!(
                "  {} ({} images): {}",
                c.name,
                c.total,
                rates.join(" ")
            ));
            if let Some(a) = c.accuracy {
                out.push_str(&format!(" accuracy {a:.4}"));
            }
            out.push('\n');
        }
        match self.spearman {
            Some(r) => out.push_str(&format!("  spearman(hit rate, accuracy) = {r:.6}\n")),
            None => out.push_str("  spearman(hit rate, accuracy) = undefined\n"),
        }
        out
    }
}

/// Refuses evaluations that could reuse tagging images: the store must come
/// from the same dump and split, and the tagging side is off limits.
pub fn check_contamination(
    store: &TagStore,
    dump_id: &str,
    split: &DatasetSplit,
    side: SplitSide,
) -> Result<()> {
    let p = &store.provenance;
    if side == SplitSide::Tagging {
        return Err(Error::Contamination(
            "the tagging side of the split built the store and cannot be evaluated".into(),
        ));
    }
    if p.dump_id != dump_id {
        return Err(Error::Contamination(format!(
            "store was built from dump {}, evaluation reads dump {dump_id}",
            p.dump_id
        )));
    }
    if p.seed != split.seed || p.split_fraction != split.fraction {
        return Err(Error::Contamination(format!(
            "store was built with seed {} and fraction {}, evaluation split uses seed {} and fraction {}",
            p.seed, p.split_fraction, split.seed, split.fraction
        )));
    }
    Ok(())
}

/// Evaluates explanations of one side of `split`.
pub fn evaluate(
    reader: &DumpReader,
    store: &TagStore,
    split: &DatasetSplit,
    side: SplitSide,
    predictions: Option<&BTreeMap<u32, u32>>,
    cfg: &EvalConfig,
) -> Result<HitsReport> {
    check_contamination(store, reader.dump_id(), split, side)?;
    let table = score_images(reader, &split.ids(side), cfg.threads)?;
    evaluate_scores(&table, store, predictions, cfg)
}

fn check_layers(table: &ScoreTable, store: &TagStore) -> Result<()> {
    let same = table.layers.len() == store.layers.len()
        && table
            .layers
            .iter()
            .zip(&store.layers)
            .all(|(a, b)| a.layer_id == b.layer_id && a.filter_count == b.filters.len());
    if same {
        Ok(())
    } else {
        Err(Error::SchemaMismatch(
            "dump layers do not match the tag store's layers".into(),
        ))
    }
}

struct Outcome {
    class: u32,
    hits: Vec<bool>,
    correct: Option<bool>,
}

/// Evaluates every image of `table`. Images are explained in parallel and
/// counted in id order.
pub fn evaluate_scores(
    table: &ScoreTable,
    store: &TagStore,
    predictions: Option<&BTreeMap<u32, u32>>,
    cfg: &EvalConfig,
) -> Result<HitsReport> {
    let mut n_values = cfg.n_values.clone();
    n_values.sort_unstable();
    n_values.dedup();
    if n_values.is_empty() || n_values[0] == 0 {
        return Err(Error::Domain(
            "n values must be non-empty and at least 1".into(),
        ));
    }
    let method = cfg.method.unwrap_or(store.method);
    method.validate()?;
    check_layers(table, store)?;

    let pool = crate::thread_pool(cfg.threads)?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        table
            .images
            .par_iter()
            .map(|img| {
                let predicted = match predictions {
                    Some(p) => Some(*p.get(&img.image_id).ok_or_else(|| {
                        Error::Data(format!("no prediction for image {}", img.image_id))
                    })?),
                    None => None,
                };
                let activated = activated_from_scores(img, &table.layers, method)?;
                let e = explain_image(img.image_id, img.class_label, predicted, activated, store)?;
                Ok(Outcome {
                    class: img.class_label,
                    hits: n_values.iter().map(|&n| hits_at_n(&e, n)).collect(),
                    correct: predicted.map(|p| p == img.class_label),
                })
            })
            .collect::<Result<_>>()
    })?;

    struct Counter {
        total: usize,
        hits: Vec<usize>,
        correct: usize,
    }
    let mut overall = vec![0usize; n_values.len()];
    let mut per_class: BTreeMap<u32, Counter> = BTreeMap::new();
    for o in &outcomes {
        let c = per_class.entry(o.class).or_insert_with(|| Counter {
            total: 0,
            hits: vec![0; n_values.len()],
            correct: 0,
        });
        c.total += 1;
        c.correct += usize::from(o.correct == Some(true));
        for (i, &h) in o.hits.iter().enumerate() {
            c.hits[i] += usize::from(h);
            overall[i] += usize::from(h);
        }
    }

    let total = outcomes.len();
    let per_class: Vec<ClassHits> = per_class
        .into_iter()
        .map(|(class, c)| ClassHits {
            class,
            name: store.class_name(class).to_owned(),
            total: c.total,
            rates: c.hits.iter().map(|&h| rate(h, c.total)).collect(),
            hits: c.hits,
            accuracy: predictions.map(|_| rate(c.correct, c.total)),
        })
        .collect();

    let spearman = if predictions.is_some() {
        let last = n_values.len() - 1;
        let x: Vec<f64> = per_class.iter().map(|c| c.rates[last]).collect();
        let y: Vec<f64> = per_class.iter().filter_map(|c| c.accuracy).collect();
        spearman(&x, &y)
    } else {
        None
    };

    Ok(HitsReport {
        store_method: store.method,
        explain_method: method,
        rates: overall.iter().map(|&h| rate(h, total)).collect(),
        hits: overall,
        n_values,
        total,
        per_class,
        spearman,
        empty: total == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::LayerSchema;
    use crate::tagging::{ClassActivationMatrix, ImageScores, Provenance};

    fn provenance() -> Provenance {
        Provenance {
            dump_id: "abc".into(),
            seed: 4,
            split_fraction: 0.8,
            model_name: "m".into(),
            tagging_images: 0,
        }
    }

    fn store() -> TagStore {
        // class 0 -> filter 0, class 1 -> filter 1
        let m = ClassActivationMatrix::from_rows(
            0,
            &[(0, vec![0.9, 0.1, 0.2]), (1, vec![0.1, 0.8, 0.3])],
        )
        .unwrap();
        TagStore::from_matrices(
            &[m],
            SelectionMethod::KBest { k: 1 },
            provenance(),
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    fn table(images: &[(u32, u32, [f64; 3])]) -> ScoreTable {
        ScoreTable {
            layers: vec![LayerSchema {
                layer_id: 0,
                filter_count: 3,
                height: 1,
                width: 1,
            }],
            images: images
                .iter()
                .map(|&(image_id, class_label, s)| ImageScores {
                    image_id,
                    class_label,
                    layers: vec![s.to_vec()],
                })
                .collect(),
        }
    }

    #[test]
    fn counts_and_rates() {
        let t = table(&[
            (0, 0, [0.9, 0.1, 0.0]),
            (1, 1, [0.1, 0.9, 0.0]),
            (2, 1, [0.9, 0.2, 0.0]),
        ]);
        let r = evaluate_scores(&t, &store(), None, &EvalConfig::new(vec![2, 1])).unwrap();
        assert_eq!(r.n_values, vec![1, 2]);
        assert_eq!(r.hits, vec![2, 2]);
        assert_eq!(r.class(1).unwrap().hits, vec![1, 1]);
        assert!((r.rate_at(1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.spearman, None);
        assert!(!r.empty);

        // explanation-time k=2 activates both labelled filters for image 2
        let cfg = EvalConfig {
            method: Some(SelectionMethod::KBest { k: 2 }),
            ..EvalConfig::new(vec![1, 2])
        };
        let r = evaluate_scores(&t, &store(), None, &cfg).unwrap();
        assert_eq!(r.hits[1], 3);
    }

    #[test]
    fn empty_set_is_flagged() {
        let r = evaluate_scores(&table(&[]), &store(), None, &EvalConfig::new(vec![1])).unwrap();
        assert!(r.empty);
        assert_eq!(r.total, 0);
        assert_eq!(r.rates, vec![0.0]);
        assert!(r.per_class.is_empty());
    }

    #[test]
    fn accuracy_and_correlation() {
        let t = table(&[
            (0, 0, [0.9, 0.1, 0.0]),
            (1, 0, [0.9, 0.1, 0.0]),
            (2, 1, [0.9, 0.1, 0.0]),
            (3, 1, [0.1, 0.9, 0.0]),
        ]);
        let preds = BTreeMap::from([(0, 0), (1, 0), (2, 0), (3, 1)]);
        let r = evaluate_scores(&t, &store(), Some(&preds), &EvalConfig::new(vec![1])).unwrap();
        assert_eq!(r.class(0).unwrap().accuracy, Some(1.0));
        assert_eq!(r.class(1).unwrap().accuracy, Some(0.5));
        assert!((r.spearman.unwrap() - 1.0).abs() < 1e-12);

        let missing = BTreeMap::from([(0, 0)]);
        assert!(evaluate_scores(&t, &store(), Some(&missing), &EvalConfig::new(vec![1])).is_err());
    }

    #[test]
    fn bad_inputs() {
        let t = table(&[(0, 0, [0.9, 0.1, 0.0])]);
        assert!(matches!(
            evaluate_scores(&t, &store(), None, &EvalConfig::new(vec![])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            evaluate_scores(&t, &store(), None, &EvalConfig::new(vec![0])),
            Err(Error::Domain(_))
        ));
        let mut wide = t.clone();
        wide.layers[0].filter_count = 4;
        assert!(matches!(
            evaluate_scores(&wide, &store(), None, &EvalConfig::new(vec![1])),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn contamination_rules() {
        let s = store();
        let split = DatasetSplit {
            seed: 4,
            fraction: 0.8,
            tagging: BTreeMap::new(),
            test: BTreeMap::new(),
            warnings: vec![],
        };
        check_contamination(&s, "abc", &split, SplitSide::Test).unwrap();
        for (dump, seed, side) in [
            ("abc", 4, SplitSide::Tagging),
            ("xyz", 4, SplitSide::Test),
            ("abc", 5, SplitSide::Test),
        ] {
            let split = DatasetSplit {
                seed,
                ..split.clone()
            };
            assert!(matches!(
                check_contamination(&s, dump, &split, side),
                Err(Error::Contamination(_))
            ));
        }
    }

    #[test]
    fn thread_count_does_not_change_report() {
        let images: Vec<(u32, u32, [f64; 3])> = (0..60)
            .map(|i| {
                (
                    i,
                    i % 2,
                    [
                        f64::from(i % 7) / 7.0,
                        f64::from(i % 5) / 5.0,
                        f64::from(i % 3) / 3.0,
                    ],
                )
            })
            .collect();
        let t = table(&images);
        let a = evaluate_scores(
            &t,
            &store(),
            None,
            &EvalConfig {
                threads: 1,
                ..EvalConfig::new(vec![1, 2])
            },
        );
        let b = evaluate_scores(
            &t,
            &store(),
            None,
            &EvalConfig {
                threads: 4,
                ..EvalConfig::new(vec![1, 2])
            },
        );
        assert_eq!(a.unwrap(), b.unwrap());
    }
}
