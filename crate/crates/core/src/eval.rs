//! Retrieval evaluation (Recall@K, P@1, R-Precision, MAP@R) over exact
//! cosine rankings, plus the training diagnostics: similarity of embeddings
//! to their class weights and the per-step loss ("difficulty") series.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_normalize, pairwise_cosine, Matrix};

/// Per-query reference indices ranked by descending cosine, self excluded
/// when the query set is the reference set. Ties break on ascending index.
#[derive(Debug, Clone)]
pub struct RankedRetrieval {
    pub order: Vec<Vec<usize>>,
}

/// Exact (non-approximate) retrieval.
pub fn retrieve(queries: &Matrix, refs: &Matrix, same_set: bool) -> Result<RankedRetrieval> {
    if same_set && queries.rows() != refs.rows() {
        return Err(Error::DimensionMismatch(
            "same_set retrieval needs query and reference sets of equal size".into(),
        ));
    }
    let cos = pairwise_cosine(queries, refs)?;
    let mut order = Vec::with_capacity(queries.rows());
    for q in 0..queries.rows() {
        let mut ranked: Vec<usize> = (0..refs.rows()).filter(|&r| !(same_set && r == q)).collect();
        let row = cos.row(q);
        ranked.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .expect("cosines are finite")
                .then(a.cmp(&b))
        });
        order.push(ranked);
    }
    Ok(RankedRetrieval { order })
}

/// The metric block of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// K -> fraction of queries with a same-class hit in the top K.
    pub recall_at: BTreeMap<u32, f64>,
    pub p_at_1: f64,
    pub r_precision: f64,
    pub map_at_r: f64,
}

/// Computes Recall@K, P@1, RP and MAP@R from a ranking.
///
/// R is the query's number of relevant references (within the ranked list,
/// so self-exclusion is already accounted for). MAP@R only credits ranks up
/// to R: (1/R) * sum_{i<=R} P(i) * rel(i).
pub fn compute_metrics(
    ranking: &RankedRetrieval,
    query_labels: &[usize],
    ref_labels: &[usize],
    ks: &[u32],
) -> Result<RetrievalMetrics> {
    let n = ranking.order.len();
    if query_labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} query labels for {} rankings",
            query_labels.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::DimensionMismatch("no queries".into()));
    }
    let mut recall_hits: BTreeMap<u32, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut p1_sum = 0.0;
    let mut rp_sum = 0.0;
    let mut map_sum = 0.0;
    for (q, ranked) in ranking.order.iter().enumerate() {
        let rel: Vec<bool> = ranked
            .iter()
            .map(|&r| ref_labels[r] == query_labels[q])
            .collect();
        let r_count = rel.iter().filter(|&&b| b).count();
        if r_count == 0 {
            return Err(Error::NoRelevant { query: q });
        }
        for (&k, hits) in recall_hits.iter_mut() {
            let top = (k as usize).min(rel.len());
            if rel[..top].iter().any(|&b| b) {
                *hits += 1.0;
            }
        }
        if rel[0] {
            p1_sum += 1.0;
        }
        let top_r = r_count.min(rel.len());
        let hits_in_r = rel[..top_r].iter().filter(|&&b| b).count();
        rp_sum += hits_in_r as f64 / r_count as f64;
        let mut hits_so_far = 0usize;
        let mut ap = 0.0;
        for (i, &is_rel) in rel[..top_r].iter().enumerate() {
            if is_rel {
                hits_so_far += 1;
                ap += hits_so_far as f64 / (i + 1) as f64;
            }
        }
        map_sum += ap / r_count as f64;
    }
    let nf = n as f64;
    Ok(RetrievalMetrics {
        recall_at: recall_hits.into_iter().map(|(k, h)| (k, h / nf)).collect(),
        p_at_1: p1_sum / nf,
        r_precision: rp_sum / nf,
        map_at_r: map_sum / nf,
    })
}

/// Mean cosine between each embedding and its own class-weight column.
pub fn mean_cos_to_weight(embeddings: &Matrix, labels: &[usize], w: &Matrix) -> Result<f64> {
    if labels.len() != embeddings.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.rows()
        )));
    }
    if embeddings.cols() != w.rows() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings are {}-dim, weights are {}-dim",
            embeddings.cols(),
            w.rows()
        )));
    }
    let mut sum = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= w.cols() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: w.cols(),
            });
        }
        let x = l2_normalize(embeddings.row(i))?;
        let col = l2_normalize(&w.column(label))?;
        sum += dot(&x, &col);
    }
    Ok(sum / labels.len() as f64)
}

/// Mean over embeddings of the best cosine against any weight column; the
/// seen/unseen diagnostic for label spaces that do not index W.
pub fn mean_cos_to_nearest_weight(embeddings: &Matrix, w: &Matrix) -> Result<f64> {
    let cos = pairwise_cosine(embeddings, &w.transpose())?;
    let mut sum = 0.0;
    for i in 0..cos.rows() {
        sum += cos.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(sum / cos.rows() as f64)
}

/// One training step's diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub active_classes: usize,
    pub extended_rows: usize,
}

/// Append-only per-step log kept by the training loop.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
}

/// Ordered (step, loss) pairs for difficulty-over-time analysis.
pub fn difficulty_series(log: &TrainingLog) -> Result<Vec<(usize, f64)>> {
    if log.steps.is_empty() {
        return Err(Error::EmptyLog);
    }
    Ok(log.steps.iter().map(|r| (r.step, r.loss)).collect())
}

/// Full evaluation document: metrics plus diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<u32, f64>,
    pub p_at_1: f64,
    pub r_precision: f64,
    pub map_at_r: f64,
    pub mean_cos_to_weight: f64,
}

impl EvalReport {
    pub fn from_metrics(metrics: RetrievalMetrics, mean_cos_to_weight: f64) -> Self {
        EvalReport {
            recall_at: metrics.recall_at,
            p_at_1: metrics.p_at_1,
            r_precision: metrics.r_precision,
            map_at_r: metrics.map_at_r,
            mean_cos_to_weight,
        }
    }
}
