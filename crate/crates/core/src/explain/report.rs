use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{hits_at_n, Explanation};
use crate::error::{Error, Result};
use crate::tagging::TagStore;
use crate::tensor::FilterKey;

/// Where one class stands in a misclassified image's explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEvidence {
    pub class: u32,
    pub name: String,
    /// 1-based rank among the explanation's tags; `None` if absent.
    pub rank: Option<usize>,
    pub frequency: u32,
    pub score_sum: f64,
    /// Activated filters tagged with the class.
    pub filters: Vec<FilterKey>,
    /// Model probability for the class, when known.
    pub probability: Option<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitAt {
    pub n: usize,
    pub hit: bool,
}

/// A class tagged both on a filter carrying the true class and on a filter
/// carrying the predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedTag {
    pub class: u32,
    pub name: String,
    pub on_true_filters: u32,
    pub on_predicted_filters: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTag {
    pub class: u32,
    pub name: String,
    pub frequency: u32,
    pub score_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub image_id: u32,
    pub true_class: ClassEvidence,
    pub predicted_class: ClassEvidence,
    pub hits: Vec<HitAt>,
    /// Activated filters tagged with both the true and the predicted class.
    pub shared_filters: Vec<FilterKey>,
    pub shared_tags: Vec<SharedTag>,
    pub ranked_tags: Vec<NamedTag>,
}

fn evidence(
    e: &Explanation,
    store: &TagStore,
    class: u32,
    probabilities: Option<&[f32]>,
) -> Result<ClassEvidence> {
    let mut filters = Vec::new();
    for key in e.activated_keys() {
        if store.tags(key)?.iter().any(|t| t.class == class) {
            filters.push(key);
        }
    }
    let tag = e.tag(class);
    Ok(ClassEvidence {
        class,
        name: store.class_name(class).to_owned(),
        rank: e.rank_of(class),
        frequency: tag.map_or(0, |t| t.frequency),
        score_sum: tag.map_or(0.0, |t| t.score_sum),
        filters,
        probability: probabilities.and_then(|p| p.get(class as usize).copied()),
    })
}

fn count_tags(store: &TagStore, filters: &[FilterKey], class: u32) -> Result<u32> {
    let mut n = 0;
    for k in filters {
        n += store.tags(*k)?.iter().filter(|t| t.class == class).count() as u32;
    }
    Ok(n)
}

/// Describes why a misclassified image was confused.
pub fn error_report(
    e: &Explanation,
    store: &TagStore,
    n_values: &[usize],
    probabilities: Option<&[f32]>,
) -> Result<ErrorReport> {
    let predicted = e.predicted_class.ok_or_else(|| {
        Error::Usage(format!("image {} has no prediction to analyse", e.image_id))
    })?;
    if predicted == e.true_class {
        return Err(Error::Usage(format!(
            "image {} is classified correctly; error analysis needs a misclassified image",
            e.image_id
        )));
    }
    let true_ev = evidence(e, store, e.true_class, probabilities)?;
    let pred_ev = evidence(e, store, predicted, probabilities)?;

    let pred_set: BTreeSet<FilterKey> = pred_ev.filters.iter().copied().collect();
    let shared_filters: Vec<FilterKey> = true_ev
        .filters
        .iter()
        .filter(|k| pred_set.contains(k))
        .copied()
        .collect();

    let mut shared_tags = Vec::new();
    for t in &e.ranked_tags {
        if t.class == e.true_class || t.class == predicted {
            continue;
        }
        let on_true = count_tags(store, &true_ev.filters, t.class)?;
        let on_pred = count_tags(store, &pred_ev.filters, t.class)?;
        if on_true > 0 && on_pred > 0 {
            shared_tags.push(SharedTag {
                class: t.class,
                name: store.class_name(t.class).to_owned(),
                on_true_filters: on_true,
                on_predicted_filters: on_pred,
            });
        }
    }

    Ok(ErrorReport {
        image_id: e.image_id,
        hits: n_values
            .iter()
            .map(|&n| HitAt {
                n,
                hit: hits_at_n(e, n),
            })
            .collect(),
        true_class: true_ev,
        predicted_class: pred_ev,
        shared_filters,
        shared_tags,
        ranked_tags: e
            .ranked_tags
            .iter()
            .map(|t| NamedTag {
                class: t.class,
                name: store.class_name(t.class).to_owned(),
                frequency: t.frequency,
                score_sum: t.score_sum,
            })
            .collect(),
    })
}

fn describe(label: &str, c: &ClassEvidence) -> String {
    let rank = c
        .rank
        .map_or_else(|| "absent".to_owned(), |r| format!("rank {r}"));
    let prob = c
        .probability
        .map_or_else(String::new, |p| format!(", p={p:.3}"));
    let filters: Vec<String> = c.filters.iter().map(ToString::to_string).collect();
    format!(
        "{label}: {} ({rank}, frequency {}{prob}) filters [{}]\n",
        c.name,
        c.frequency,
        filters.join(" ")
    )
}

impl ErrorReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("image {} misclassified\n", self.image_id);
        out.push_str(&describe("  true class", &self.true_class));
        out.push_str(&describe("  predicted", &self.predicted_class));
        let hits: Vec<String> = self
            .hits
            .iter()
            .map(|h| format!("Hits@{}={}", h.n, if h.hit { "yes" } else { "no" }))
            .collect();
        out.push_str(&format!("  {}\n", hits.join(" ")));
        let shared: Vec<String> = self
            .shared_filters
            .iter()
            .map(ToString::to_string)
            .collect();
        out.push_str(&format!(
            "  filters carrying both tags: [{}]\n",
            shared.join(" ")
        ));
        for s in &self.shared_tags {
            out.push_str(&format!(
                "  shared tag {}: on {} true-class filter(s), {} predicted-class filter(s)\n",
                s.name, s.on_true_filters, s.on_predicted_filters
            ));
        }
        out.push_str("  tags of the activated filters:\n");
        for (i, t) in self.ranked_tags.iter().enumerate() {
            out.push_str(&format!(
                "    {:>3}. {} freq={}\n",
                i + 1,
                t.name,
                t.frequency
            ));
        }
        out
    }
}
