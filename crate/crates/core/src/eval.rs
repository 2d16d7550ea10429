//! Ranking metrics and end-to-end benchmark reports.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rerank::{plan_windows, rerank_sliding, EpisodeRunner, GlobalRanking, RerankError};
use crate::store::{cosine_topk, EmbeddingMatrix, Pool, Query, RetrievalHit, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("query {0:?} has no relevant candidates")]
    EmptyRelevant(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("query {query_id:?} ranks {id:?} more than once")]
    DuplicateRanked { query_id: String, id: String },
    #[error("unknown metric {0:?}; expected recall@K or map@K")]
    UnknownMetric(String),
    #[error("duplicate query id {0:?}")]
    DuplicateQuery(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub ranked_ids: Vec<String>,
    pub relevant_ids: BTreeSet<String>,
}

impl QueryResult {
    pub fn new(
        query_id: impl Into<String>,
        ranked_ids: Vec<String>,
        relevant_ids: BTreeSet<String>,
    ) -> Result<Self, EvalError> {
        let r = QueryResult {
            query_id: query_id.into(),
            ranked_ids,
            relevant_ids,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.relevant_ids.is_empty() {
            return Err(EvalError::EmptyRelevant(self.query_id.clone()));
        }
        let mut seen = HashSet::with_capacity(self.ranked_ids.len());
        for id in &self.ranked_ids {
            if !seen.insert(id) {
                return Err(EvalError::DuplicateRanked {
                    query_id: self.query_id.clone(),
                    id: id.clone(),
                });
            }
        }
        Ok(())
    }

    fn check(&self, k: usize) -> Result<(), EvalError> {
        if k == 0 {
            return Err(EvalError::InvalidK);
        }
        if self.relevant_ids.is_empty() {
            return Err(EvalError::EmptyRelevant(self.query_id.clone()));
        }
        Ok(())
    }
}

/// 1 if a relevant id appears in the first `min(k, len)` positions, else 0.
pub fn recall_at_k(result: &QueryResult, k: usize) -> Result<f64, EvalError> {
    result.check(k)?;
    let hit = result
        .ranked_ids
        .iter()
        .take(k)
        .any(|id| result.relevant_ids.contains(id));
    Ok(if hit { 1.0 } else { 0.0 })
}

/// Average precision truncated at `k`, normalised by `min(|relevant|, k)`.
pub fn map_at_k(result: &QueryResult, k: usize) -> Result<f64, EvalError> {
    result.check(k)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in result.ranked_ids.iter().take(k).enumerate() {
        if result.relevant_ids.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / result.relevant_ids.len().min(k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricKind {
    Recall,
    Map,
}

/// A metric at a cutoff, written `recall@K` or `map@K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Metric {
    pub kind: MetricKind,
    pub k: usize,
}

impl Metric {
    pub const fn recall(k: usize) -> Self {
        Metric {
            kind: MetricKind::Recall,
            k,
        }
    }

    pub const fn map(k: usize) -> Self {
        Metric {
            kind: MetricKind::Map,
            k,
        }
    }

    pub fn defaults() -> Vec<Metric> {
        vec![
            Metric::recall(1),
            Metric::recall(5),
            Metric::recall(10),
            Metric::map(5),
        ]
    }

    pub fn evaluate(&self, result: &QueryResult) -> Result<f64, EvalError> {
        match self.kind {
            MetricKind::Recall => recall_at_k(result, self.k),
            MetricKind::Map => map_at_k(result, self.k),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            MetricKind::Recall => "recall",
            MetricKind::Map => "map",
        };
        write!(f, "{name}@{}", self.k)
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EvalError::UnknownMetric(s.to_owned());
        let (name, k) = s.trim().split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match name.to_ascii_lowercase().as_str() {
            "recall" | "r" => Ok(Metric::recall(k)),
            "map" => Ok(Metric::map(k)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Metric {
    type Error = EvalError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Metric> for String {
    fn from(m: Metric) -> String {
        m.to_string()
    }
}

/// Evaluates every metric, keyed by its display name.
pub fn score_all(result: &QueryResult, metrics: &[Metric]) -> Result<BTreeMap<String, f64>, EvalError> {
    metrics
        .iter()
        .map(|m| Ok((m.to_string(), m.evaluate(result)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: String,
    pub first_stage: BTreeMap<String, f64>,
    pub reranked: BTreeMap<String, f64>,
    #[serde(default)]
    pub failed_windows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QueryRow {
    /// A query fails when it errored or any of its windows failed.
    pub fn failed(&self) -> bool {
        self.error.is_some() || self.failed_windows > 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub engine_version: String,
    pub policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Wall-clock runtime; only recorded for live backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub metrics: Vec<Metric>,
    pub means: BTreeMap<String, f64>,
    pub first_stage_means: BTreeMap<String, f64>,
    pub queries: usize,
    pub failed: usize,
    pub exclude_failures: bool,
    pub meta: RunMeta,
    #[serde(skip)]
    pub rows: Vec<QueryRow>,
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a BTreeMap<String, f64>>, metrics: &[Metric]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, f64> = metrics.iter().map(|m| (m.to_string(), 0.0)).collect();
    let mut n = 0usize;
    for row in rows {
        n += 1;
        for (name, sum) in sums.iter_mut() {
            *sum += row.get(name).copied().unwrap_or(0.0);
        }
    }
    if n > 0 {
        for v in sums.values_mut() {
            *v /= n as f64;
        }
    }
    sums
}

/// Aggregates per-query rows. Failed rows carry zero metrics and are averaged
/// in unless `exclude_failures` is set.
pub fn assemble_report(
    rows: Vec<QueryRow>,
    metrics: &[Metric],
    exclude_failures: bool,
    meta: RunMeta,
) -> BenchmarkReport {
    let included = || rows.iter().filter(|r| !(exclude_failures && r.failed()));
    BenchmarkReport {
        metrics: metrics.to_vec(),
        means: mean_of(included().map(|r| &r.reranked), metrics),
        first_stage_means: mean_of(included().map(|r| &r.first_stage), metrics),
        queries: rows.len(),
        failed: rows.iter().filter(|r| r.failed()).count(),
        exclude_failures,
        meta,
        rows,
    }
}

impl BenchmarkReport {
    /// A fixed-width table of first-stage and reranked means.
    pub fn table(&self) -> String {
        let mut out = format!("{:<12} {:>12} {:>12}\n", "metric", "first-stage", "reranked");
        for m in &self.metrics {
            let name = m.to_string();
            out.push_str(&format!(
                "{:<12} {:>12.4} {:>12.4}\n",
                name,
                self.first_stage_means.get(&name).copied().unwrap_or(0.0),
                self.means.get(&name).copied().unwrap_or(0.0),
            ));
        }
        out.push_str(&format!("queries: {}  failed: {}\n", self.queries, self.failed));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSetup {
    pub k_top: usize,
    pub window: usize,
    pub stride: usize,
    pub window_retries: u32,
    pub metrics: Vec<Metric>,
    pub exclude_failures: bool,
}

impl Default for BenchmarkSetup {
    fn default() -> Self {
        BenchmarkSetup {
            k_top: 50,
            window: 20,
            stride: 10,
            window_retries: 0,
            metrics: Metric::defaults(),
            exclude_failures: false,
        }
    }
}

/// Everything produced for one query.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub row: QueryRow,
    pub hits: Option<Vec<RetrievalHit>>,
    pub ranking: Option<GlobalRanking>,
}

fn zeros(metrics: &[Metric]) -> BTreeMap<String, f64> {
    metrics.iter().map(|m| (m.to_string(), 0.0)).collect()
}

/// Retrieves, reranks and scores one query. Failures are folded into the row.
pub fn evaluate_query(
    pool: &Pool,
    query: &Query,
    query_matrix: Option<&EmbeddingMatrix>,
    setup: &BenchmarkSetup,
    runner: &dyn EpisodeRunner,
) -> QueryOutcome {
    let mut row = QueryRow {
        query_id: query.id.clone(),
        first_stage: zeros(&setup.metrics),
        reranked: zeros(&setup.metrics),
        failed_windows: 0,
        error: None,
    };
    let hits = match query
        .vector(query_matrix)
        .and_then(|v| cosine_topk(v, pool, setup.k_top))
    {
        Ok(h) => h,
        Err(e) => {
            row.error = Some(e.to_string());
            return QueryOutcome {
                row,
                hits: None,
                ranking: None,
            };
        }
    };
    let score = |ids: Vec<String>| {
        QueryResult::new(query.id.clone(), ids, query.gt_candidate_ids.clone())
            .and_then(|r| score_all(&r, &setup.metrics))
    };
    match score(hits.iter().map(|h| h.candidate_id.clone()).collect()) {
        Ok(m) => row.first_stage = m,
        Err(e) => row.error = Some(e.to_string()),
    }
    let ranking = plan_windows(hits.len(), setup.window, setup.stride)
        .and_then(|plan| rerank_sliding(query, &hits, runner, &plan, setup.window_retries));
    let ranking = match ranking {
        Ok(r) => r,
        Err(e) => {
            row.error.get_or_insert(e.to_string());
            return QueryOutcome {
                row,
                hits: Some(hits),
                ranking: None,
            };
        }
    };
    row.failed_windows = ranking.failed_windows();
    if row.failed_windows == 0 && row.error.is_none() {
        match score(ranking.ordered_candidate_ids.clone()) {
            Ok(m) => row.reranked = m,
            Err(e) => row.error = Some(e.to_string()),
        }
    }
    QueryOutcome {
        row,
        hits: Some(hits),
        ranking: Some(ranking),
    }
}

/// Runs every query in parallel on the current rayon pool; outcomes keep query order.
pub fn run_benchmark(
    pool: &Pool,
    queries: &[Query],
    query_matrix: Option<&EmbeddingMatrix>,
    setup: &BenchmarkSetup,
    runner: &dyn EpisodeRunner,
    meta: RunMeta,
) -> Result<(BenchmarkReport, Vec<QueryOutcome>), EvalError> {
    let mut seen = HashSet::new();
    for q in queries {
        if !seen.insert(&q.id) {
            return Err(EvalError::DuplicateQuery(q.id.clone()));
        }
        if q.gt_candidate_ids.is_empty() {
            return Err(EvalError::EmptyRelevant(q.id.clone()));
        }
    }
    let outcomes: Vec<QueryOutcome> = queries
        .par_iter()
        .map(|q| evaluate_query(pool, q, query_matrix, setup, runner))
        .collect();
    let rows = outcomes.iter().map(|o| o.row.clone()).collect();
    let report = assemble_report(rows, &setup.metrics, setup.exclude_failures, meta);
    Ok((report, outcomes))
}
