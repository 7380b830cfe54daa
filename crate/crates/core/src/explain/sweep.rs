use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{evaluate_scores, EvalConfig, HitsReport};
use crate::error::{Error, Result};
use crate::ingest::{DatasetSplit, DumpReader};
use crate::tagging::{score_images, Provenance, ScoreTable, SelectionMethod, TagStore};

/// One line of a hit-rate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub param: String,
    pub n: usize,
    /// Class name, or `ALL` for the whole set.
    pub class: String,
    pub hits: usize,
    pub total: usize,
    pub rate: f64,
}

impl SweepRow {
    pub fn new(method: SelectionMethod, n: usize, class: &str, hits: usize, total: usize) -> Self {
        Self {
            method: method.kind().to_owned(),
            param: method.param(),
            n,
            class: class.to_owned(),
            hits,
            total,
            rate: if total == 0 {
                0.0
            } else {
                hits as f64 / total as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<HitsReport>,
}

/// CSV with a header row, columns in [`SweepRow`] field order.
pub fn rows_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    /// Overall rate for one grid point and n.
    pub fn overall(&self, method: SelectionMethod, n: usize) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.store_method == method)
            .and_then(|r| r.rate_at(n))
    }
}

fn subset(table: &ScoreTable, ids: &std::collections::BTreeSet<u32>) -> ScoreTable {
    ScoreTable {
        layers: table.layers.clone(),
        images: table
            .images
            .iter()
            .filter(|s| ids.contains(&s.image_id))
            .cloned()
            .collect(),
    }
}

/// Tags and evaluates every grid point. Per-image scores and class means
/// are computed once and shared by all grid points; each point explains
/// with its own method.
pub fn sweep(
    reader: &DumpReader,
    split: &DatasetSplit,
    grid: &[SelectionMethod],
    n_values: &[usize],
    predictions: Option<&BTreeMap<u32, u32>>,
    threads: usize,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::Usage("sweep grid is empty".into()));
    }
    for m in grid {
        m.validate()?;
    }
    let tagging = split.tagging_ids();
    let test = split.test_ids();
    let all: std::collections::BTreeSet<u32> = tagging.union(&test).copied().collect();
    let scores = score_images(reader, &all, threads)?;
    let means = subset(&scores, &tagging).class_means()?;
    let test_scores = subset(&scores, &test);
    let provenance = Provenance {
        dump_id: reader.dump_id().to_owned(),
        seed: split.seed,
        split_fraction: split.fraction,
        model_name: reader.manifest().model_name.clone(),
        tagging_images: tagging.len(),
    };

    let mut table = SweepTable {
        rows: Vec::new(),
        reports: Vec::new(),
    };
    for &method in grid {
        let store = TagStore::from_matrices(
            &means,
            method,
            provenance.clone(),
            reader.classes().to_vec(),
        )?;
        let cfg = EvalConfig {
            method: None,
            n_values: n_values.to_vec(),
            threads,
        };
        let report = evaluate_scores(&test_scores, &store, predictions, &cfg)?;
        table.rows.extend(report.rows());
        table.reports.push(report);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = vec![
            SweepRow::new(SelectionMethod::KBest { k: 2 }, 1, "ALL", 3, 4),
            SweepRow::new(SelectionMethod::QQuantile { q: 0.25 }, 5, "cat", 0, 0),
        ];
        let csv = rows_to_csv(&rows).unwrap();
        assert_eq!(
            csv,
            "method,param,n,class,hits,total,rate\nk_best,2,1,ALL,3,4,0.75\nq_quantile,0.25,5,cat,0,0,0.0\n"
        );
    }
}
