use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ClassActivationMatrix;
use crate::error::{Error, Result};

/// How many filters each class tags per layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionMethod {
    /// The `k` highest-scoring filters.
    KBest { k: usize },
    /// The top `ceil(q * filters)` filters.
    QQuantile { q: f64 },
}

impl SelectionMethod {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SelectionMethod::KBest { k } if k < 1 => {
                Err(Error::Domain(format!("k must be at least 1, got {k}")))
            }
            SelectionMethod::QQuantile { q } if !(q > 0.0 && q <= 1.0) => {
                Err(Error::Domain(format!("q must lie in (0, 1], got {q}")))
            }
            _ => Ok(()),
        }
    }

    /// Filters selected out of a layer with `filters` filters.
    pub fn count(&self, filters: usize) -> usize {
        match *self {
            SelectionMethod::KBest { k } => k.min(filters),
            SelectionMethod::QQuantile { q } => quantile_count(q, filters),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SelectionMethod::KBest { .. } => "k_best",
            SelectionMethod::QQuantile { .. } => "q_quantile",
        }
    }

    /// The parameter value as text, e.g. `"3"` or `"0.25"`.
    pub fn param(&self) -> String {
        match *self {
            SelectionMethod::KBest { k } => k.to_string(),
            SelectionMethod::QQuantile { q } => q.to_string(),
        }
    }
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            SelectionMethod::KBest { k } => write!(f, "k={k}"),
            SelectionMethod::QQuantile { q } => write!(f, "q={q}"),
        }
    }
}

/// `ceil(q * n)`, tolerant of products like `0.3 * 10 = 3.0000000000000004`,
/// and never below one filter for a non-empty layer.
pub fn quantile_count(q: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let exact = q * n as f64;
    let nearest = exact.round();
    let c = if (exact - nearest).abs() <= 1e-9 * n as f64 {
        nearest
    } else {
        exact.ceil()
    };
    (c as usize).clamp(1, n)
}

fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `count` highest scores, best first; equal scores go to
/// the lower index.
pub fn top_filters(scores: &[f64], count: usize) -> Vec<usize> {
    let count = count.min(scores.len());
    if count == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if count < idx.len() {
        idx.select_nth_unstable_by(count - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(count);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    idx
}

/// Filters selected for each class row of one layer, best first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSelection {
    pub layer_id: u16,
    pub per_class: BTreeMap<u32, Vec<usize>>,
}

pub fn select(matrix: &ClassActivationMatrix, method: SelectionMethod) -> Result<LayerSelection> {
    method.validate()?;
    let count = method.count(matrix.filter_count);
    Ok(LayerSelection {
        layer_id: matrix.layer_id,
        per_class: matrix
            .rows()
            .map(|(class, row)| (class, top_filters(row, count)))
            .collect(),
    })
}

pub fn select_k_best(matrix: &ClassActivationMatrix, k: usize) -> Result<LayerSelection> {
    select(matrix, SelectionMethod::KBest { k })
}

pub fn select_q_quantile(matrix: &ClassActivationMatrix, q: f64) -> Result<LayerSelection> {
    select(matrix, SelectionMethod::QQuantile { q })
}
