//! Ranking metrics over top-3 predictions: P@1, R@1, F1@3, MRR@3, NDCG@3.
//!
//! Matching is exact string equality; tokens are expected to be normalized
//! upstream. Aggregates are arithmetic means over instances, reported in
//! percent. Precision@3 divides by 3 even when fewer predictions were made,
//! so short lists are penalized rather than flattered.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{ClozeInstance, PredictionRecord};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("gold distractor set is empty")]
    EmptyGold,
    #[error("duplicate gold distractor {0:?}")]
    DuplicateGold(String),
    #[error("duplicate prediction {0:?}")]
    DuplicatePrediction(String),
    #[error("no instances to evaluate")]
    EmptyDataset,
    #[error("no prediction for instance {id}")]
    MissingPrediction { id: String },
    #[error("prediction for unknown instance {id}")]
    UnknownInstance { id: String },
    #[error("multiple prediction records for instance {id}")]
    DuplicateRecord { id: String },
    #[error("instance {id}: {source}")]
    Instance {
        id: String,
        #[source]
        source: Box<MetricsError>,
    },
}

/// Scores for a single instance, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InstanceMetrics {
    pub p_at_1: f64,
    pub r_at_1: f64,
    pub f1_at_3: f64,
    pub mrr_at_3: f64,
    pub ndcg_at_3: f64,
}

/// Mean scores over a dataset, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub p_at_1: f64,
    pub r_at_1: f64,
    pub f1_at_3: f64,
    pub mrr_at_3: f64,
    pub ndcg_at_3: f64,
}

impl AggregateMetrics {
    /// Each value rounded to two decimals, as reported.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| (v * 100.0).round() / 100.0;
        Self {
            p_at_1: r(self.p_at_1),
            r_at_1: r(self.r_at_1),
            f1_at_3: r(self.f1_at_3),
            mrr_at_3: r(self.mrr_at_3),
            ndcg_at_3: r(self.ndcg_at_3),
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.p_at_1,
            self.r_at_1,
            self.f1_at_3,
            self.mrr_at_3,
            self.ndcg_at_3,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ScoredInstance {
    pub id: String,
    pub metrics: InstanceMetrics,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub per_instance: Vec<ScoredInstance>,
    pub aggregate: AggregateMetrics,
}

/// Predictions joined with their ground truth.
#[derive(Debug, Clone)]
pub struct EvalInstance {
    pub id: String,
    pub predictions: Vec<String>,
    pub gold: Vec<String>,
}

fn discount(position: usize) -> f64 {
    // Positions are 0-based; the DCG denominator is log2(position + 2).
    ((position + 2) as f64).log2()
}

fn ideal_dcg(gold_size: usize) -> f64 {
    (0..gold_size.min(3)).map(|i| 1.0 / discount(i)).sum()
}

/// Scores one prediction list against one gold set. Only the first three
/// predictions count; an empty list scores zero everywhere.
pub fn score_instance(
    predictions: &[String],
    gold: &[String],
) -> Result<InstanceMetrics, MetricsError> {
    let mut gold_set = HashSet::with_capacity(gold.len());
    for g in gold {
        if !gold_set.insert(g.as_str()) {
            return Err(MetricsError::DuplicateGold(g.clone()));
        }
    }
    if gold_set.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    let mut seen = HashSet::with_capacity(predictions.len());
    for p in predictions {
        if !seen.insert(p.as_str()) {
            return Err(MetricsError::DuplicatePrediction(p.clone()));
        }
    }
    let rel: Vec<bool> = predictions
        .iter()
        .take(3)
        .map(|p| gold_set.contains(p.as_str()))
        .collect();
    let hits = rel.iter().filter(|r| **r).count() as f64;
    let gold_size = gold_set.len() as f64;

    let p_at_1 = if rel.first().copied().unwrap_or(false) {
        1.0
    } else {
        0.0
    };
    let r_at_1 = p_at_1 / gold_size;
    let precision = hits / 3.0;
    let recall = hits / gold_size;
    let f1_at_3 = if hits > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let mrr_at_3 = rel
        .iter()
        .position(|r| *r)
        .map_or(0.0, |i| 1.0 / (i as f64 + 1.0));
    let dcg: f64 = rel
        .iter()
        .enumerate()
        .map(|(i, r)| if *r { 1.0 / discount(i) } else { 0.0 })
        .sum();
    let ndcg_at_3 = dcg / ideal_dcg(gold_set.len());

    Ok(InstanceMetrics {
        p_at_1,
        r_at_1,
        f1_at_3,
        mrr_at_3,
        ndcg_at_3,
    })
}

/// Joins prediction records to dataset instances by id. Every instance needs
/// exactly one record and no record may point at a missing instance.
pub fn pair_with_gold(
    records: &[PredictionRecord],
    instances: &[ClozeInstance],
) -> Result<Vec<EvalInstance>, MetricsError> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::with_capacity(records.len());
    for record in records {
        if by_id.insert(record.id.as_str(), record).is_some() {
            return Err(MetricsError::DuplicateRecord {
                id: record.id.clone(),
            });
        }
    }
    let mut used = HashSet::with_capacity(instances.len());
    let mut out = Vec::with_capacity(instances.len());
    for instance in instances {
        let record =
            by_id
                .get(instance.id.as_str())
                .ok_or_else(|| MetricsError::MissingPrediction {
                    id: instance.id.clone(),
                })?;
        used.insert(instance.id.as_str());
        out.push(EvalInstance {
            id: instance.id.clone(),
            predictions: record.predictions.clone(),
            gold: instance.gold_distractors.clone(),
        });
    }
    for record in records {
        if !used.contains(record.id.as_str()) {
            return Err(MetricsError::UnknownInstance {
                id: record.id.clone(),
            });
        }
    }
    Ok(out)
}

/// Scores every instance and averages, reporting percentages.
pub fn evaluate(items: &[EvalInstance]) -> Result<Evaluation, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut per_instance = Vec::with_capacity(items.len());
    let mut sums = [0.0f64; 5];
    for item in items {
        let metrics =
            score_instance(&item.predictions, &item.gold).map_err(|source| {
                MetricsError::Instance {
                    id: item.id.clone(),
                    source: Box::new(source),
                }
            })?;
        let values = [
            metrics.p_at_1,
            metrics.r_at_1,
            metrics.f1_at_3,
            metrics.mrr_at_3,
            metrics.ndcg_at_3,
        ];
        for (s, v) in sums.iter_mut().zip(values) {
            *s += v;
        }
        per_instance.push(ScoredInstance {
            id: item.id.clone(),
            metrics,
        });
    }
    let n = items.len() as f64;
    let aggregate = AggregateMetrics {
        p_at_1: sums[0] / n * 100.0,
        r_at_1: sums[1] / n * 100.0,
        f1_at_3: sums[2] / n * 100.0,
        mrr_at_3: sums[3] / n * 100.0,
        ndcg_at_3: sums[4] / n * 100.0,
    };
    Ok(Evaluation {
        per_instance,
        aggregate,
    })
}

/// Fixed-width table of labeled metric rows, values rounded to two decimals.
pub fn metrics_table(rows: &[(String, AggregateMetrics)]) -> String {
    let label_width = rows
        .iter()
        .map(|(label, _)| label.len())
        .chain(std::iter::once("condition".len()))
        .max()
        .unwrap_or(9);
    let mut out = format!(
        "{:<label_width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "condition", "p@1", "r@1", "f1@3", "mrr@3", "ndcg@3"
    );
    for (label, metrics) in rows {
        let r = metrics.rounded();
        out.push_str(&format!(
            "{label:<label_width$}  {:>8.2}  {:>8.2}  {:>8.2}  {:>8.2}  {:>8.2}\n",
            r.p_at_1, r.r_at_1, r.f1_at_3, r.mrr_at_3, r.ndcg_at_3
        ));
    }
    out
}
