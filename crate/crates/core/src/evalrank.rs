//! Candidate ranking and retrieval metrics (recall@k, MRR, MAP).

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Query;
use crate::diffcore::Array;
use crate::embeddings::Embedder;
use crate::error::{Error, Result};
use crate::model::Mrnn;

/// Candidates of one query in ascending distance order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub doc_ids: Vec<String>,
    pub distances: Vec<f64>,
    pub relevant: Vec<bool>,
}

impl RankedList {
    /// 1-based ranks of the relevant documents.
    pub fn relevant_ranks(&self) -> Vec<usize> {
        self.relevant
            .iter()
            .enumerate()
            .filter(|(_, r)| **r)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn first_relevant(&self) -> Option<usize> {
        self.relevant.iter().position(|r| *r).map(|i| i + 1)
    }
}

/// Ascending distance; equal distances fall back to doc id order.
pub fn compare(a: (&str, f64), b: (&str, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0))
}

/// Orders `(doc id, distance, relevant)` triples.
pub fn rank_by_distance(query_id: &str, scored: &[(String, f64, bool)]) -> Result<RankedList> {
    if scored.is_empty() {
        return Err(Error::Domain(format!("query `{query_id}` has no candidates to rank")));
    }
    let mut order: Vec<&(String, f64, bool)> = scored.iter().collect();
    order.sort_by(|a, b| compare((&a.0, a.1), (&b.0, b.1)));
    Ok(RankedList {
        query_id: query_id.to_string(),
        doc_ids: order.iter().map(|c| c.0.clone()).collect(),
        distances: order.iter().map(|c| c.1).collect(),
        relevant: order.iter().map(|c| c.2).collect(),
    })
}

/// Scores every candidate of `query` with `model` and ranks them.
pub fn rank_candidates(model: &Mrnn, embedder: &Embedder, query: &Query) -> Result<RankedList> {
    if query.candidates.is_empty() {
        return Err(Error::Domain(format!("query `{}` has no candidates to rank", query.query_id)));
    }
    let q = model.embed_query(embedder, query)?;
    let docs = query
        .candidates
        .iter()
        .map(|c| model.embed_doc(embedder, c))
        .collect::<Result<Vec<Array>>>()?;
    let dists = model.score_candidates(&q, &docs)?;
    let scored: Vec<(String, f64, bool)> = query
        .candidates
        .iter()
        .zip(dists)
        .map(|(c, d)| (c.doc_id.clone(), d, c.relevant()))
        .collect();
    rank_by_distance(&query.query_id, &scored)
}

/// Ranks many queries in parallel; output order follows the input.
pub fn rank_all<'a>(model: &Mrnn, embedder: &Embedder, queries: impl IntoIterator<Item = &'a Query>) -> Result<Vec<RankedList>> {
    let queries: Vec<&Query> = queries.into_iter().collect();
    queries.par_iter().map(|q| rank_candidates(model, embedder, q)).collect()
}

/// Fraction of lists with a relevant document in the top `k`.
pub fn recall_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Usage("recall@k needs k >= 1".into()));
    }
    if lists.is_empty() {
        return Ok(0.0);
    }
    let hits = lists
        .iter()
        .filter(|l| l.relevant.iter().take(k).any(|r| *r))
        .count();
    Ok(hits as f64 / lists.len() as f64)
}

/// A mean over queries plus the number of queries left out of it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetric {
    pub value: f64,
    pub excluded: usize,
}

fn mean_over_relevant(lists: &[RankedList], per_query: impl Fn(&RankedList) -> f64) -> MeanMetric {
    let (mut total, mut used) = (0.0, 0usize);
    for l in lists.iter().filter(|l| l.first_relevant().is_some()) {
        total += per_query(l);
        used += 1;
    }
    MeanMetric {
        value: if used == 0 { 0.0 } else { total / used as f64 },
        excluded: lists.len() - used,
    }
}

/// Mean reciprocal rank of the first relevant document.
pub fn mrr(lists: &[RankedList]) -> MeanMetric {
    mean_over_relevant(lists, |l| 1.0 / l.first_relevant().expect("filtered") as f64)
}

pub fn average_precision(list: &RankedList) -> f64 {
    let ranks = list.relevant_ranks();
    if ranks.is_empty() {
        return 0.0;
    }
    let sum: f64 = ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| (i + 1) as f64 / r as f64)
        .sum();
    sum / ranks.len() as f64
}

/// Mean average precision.
pub fn map_metric(lists: &[RankedList]) -> MeanMetric {
    mean_over_relevant(lists, average_precision)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub first_relevant_rank: Option<usize>,
    pub relevant_ranks: Vec<usize>,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    /// Queries without a relevant candidate; left out of every metric.
    pub excluded: usize,
    pub recall: BTreeMap<String, f64>,
    pub mrr: f64,
    pub map: f64,
    pub per_query: Vec<QueryResult>,
}

pub const REPORT_KS: [usize; 4] = [1, 3, 5, 10];

impl EvalReport {
    pub fn from_lists(lists: &[RankedList]) -> Self {
        let usable: Vec<RankedList> = lists.iter().filter(|l| l.first_relevant().is_some()).cloned().collect();
        let recall = REPORT_KS
            .iter()
            .map(|&k| (format!("recall@{k}"), recall_at_k(&usable, k).expect("k >= 1")))
            .collect();
        EvalReport {
            queries: lists.len(),
            excluded: lists.len() - usable.len(),
            recall,
            mrr: mrr(&usable).value,
            map: map_metric(&usable).value,
            per_query: lists
                .iter()
                .map(|l| QueryResult {
                    query_id: l.query_id.clone(),
                    first_relevant_rank: l.first_relevant(),
                    relevant_ranks: l.relevant_ranks(),
                    candidates: l.doc_ids.len(),
                })
                .collect(),
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&format!("recall@{k}")).copied()
    }
}
