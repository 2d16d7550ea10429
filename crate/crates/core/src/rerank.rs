//! Sliding-window reranking over first-stage hits.
//!
//! Windows are processed from the tail of the list toward the head. Each
//! episode reorders its window in place, so a candidate promoted to the front
//! of one window is carried into the next (overlapping) window.

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineError, Episode};
use crate::protocol::RankList;
use crate::store::{Pool, Query, RetrievalHit};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RerankError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("stride {stride} exceeds window {window}; candidates between windows would never be ranked")]
    StrideExceedsWindow { stride: usize, window: usize },
    #[error("plan covers {plan} positions but {hits} hits were given")]
    PlanMismatch { plan: usize, hits: usize },
    #[error("candidate {0:?} appears twice in the hit list")]
    DuplicateHit(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window: usize,
    pub stride: usize,
    pub total: usize,
    /// Half-open `[start, end)` ranges in processing order.
    pub ranges: Vec<(usize, usize)>,
}

/// Plans windows of size `window` stepping back by `stride` from the tail;
/// the head window is clamped to `[0, window)`.
pub fn plan_windows(k_top: usize, window: usize, stride: usize) -> Result<WindowPlan, RerankError> {
    if k_top == 0 {
        return Err(RerankError::NonPositive("K_top"));
    }
    if window == 0 {
        return Err(RerankError::NonPositive("window"));
    }
    if stride == 0 {
        return Err(RerankError::NonPositive("stride"));
    }
    if stride > window {
        return Err(RerankError::StrideExceedsWindow { stride, window });
    }
    let mut ranges = Vec::new();
    if k_top <= window {
        ranges.push((0, k_top));
    } else {
        let mut start = k_top - window;
        loop {
            ranges.push((start, start + window));
            if start == 0 {
                break;
            }
            start = start.saturating_sub(stride);
        }
    }
    Ok(WindowPlan {
        window,
        stride,
        total: k_top,
        ranges,
    })
}

/// Runs one episode on a window of candidate ids.
pub trait EpisodeRunner: Sync {
    fn run_window(&self, query: &Query, window_ids: &[String]) -> Result<Episode, EngineError>;
}

impl<F> EpisodeRunner for F
where
    F: Fn(&Query, &[String]) -> Result<Episode, EngineError> + Sync,
{
    fn run_window(&self, query: &Query, window_ids: &[String]) -> Result<Episode, EngineError> {
        self(query, window_ids)
    }
}

/// Resolves window ids against a pool and runs the engine.
pub struct PoolRunner<'a> {
    pub pool: &'a Pool,
    pub engine: &'a Engine,
}

impl EpisodeRunner for PoolRunner<'_> {
    fn run_window(&self, query: &Query, window_ids: &[String]) -> Result<Episode, EngineError> {
        let window = self.pool.resolve(window_ids)?;
        self.engine.run_episode(query, &window)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum WindowStatus {
    Reordered,
    Unanswered,
    /// The answer was not a permutation of the window; the window is left as is.
    InvalidAnswer,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowOutcome {
    pub range: (usize, usize),
    pub input_ids: Vec<String>,
    pub answer: Option<RankList>,
    #[serde(flatten)]
    pub status: WindowStatus,
    pub attempts: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalRanking {
    pub query_id: String,
    #[serde(rename = "input_order")]
    pub input_ids: Vec<String>,
    #[serde(rename = "final_order")]
    pub ordered_candidate_ids: Vec<String>,
    pub windows: Vec<WindowOutcome>,
    /// Completed episodes, in window order; failed windows contribute none.
    #[serde(skip)]
    pub episodes: Vec<(Vec<String>, Episode)>,
}

impl GlobalRanking {
    pub fn failed_windows(&self) -> usize {
        self.windows
            .iter()
            .filter(|w| matches!(w.status, WindowStatus::Failed { .. }))
            .count()
    }
}

/// Reranks `hits` window by window. A window whose episode fails (after
/// `retries` extra attempts) or produces no usable answer keeps its order.
pub fn rerank_sliding(
    query: &Query,
    hits: &[RetrievalHit],
    runner: &dyn EpisodeRunner,
    plan: &WindowPlan,
    retries: u32,
) -> Result<GlobalRanking, RerankError> {
    if plan.total != hits.len() {
        return Err(RerankError::PlanMismatch {
            plan: plan.total,
            hits: hits.len(),
        });
    }
    let input: Vec<String> = hits.iter().map(|h| h.candidate_id.clone()).collect();
    for (i, id) in input.iter().enumerate() {
        if input[..i].contains(id) {
            return Err(RerankError::DuplicateHit(id.clone()));
        }
    }
    let mut working = input.clone();
    let mut windows = Vec::with_capacity(plan.ranges.len());
    let mut episodes = Vec::new();

    for &(start, end) in &plan.ranges {
        let ids = working[start..end].to_vec();
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            match runner.run_window(query, &ids) {
                Ok(ep) => break Ok(ep),
                Err(e) if attempts <= retries => {
                    log::warn!("window {start}..{end} of {:?} failed: {e}; retrying", query.id);
                }
                Err(e) => break Err(e),
            }
        };
        let (answer, status) = match result {
            Err(e) => (None, WindowStatus::Failed {
                error: e.to_string(),
            }),
            Ok(ep) => {
                let answer = ep.trajectory.answer.clone();
                episodes.push((ids.clone(), ep));
                match &answer {
                    None => (None, WindowStatus::Unanswered),
                    Some(a) if !a.is_permutation_of(ids.len()) => {
                        (answer, WindowStatus::InvalidAnswer)
                    }
                    Some(a) => {
                        for (slot, &pos) in working[start..end].iter_mut().zip(a.as_slice()) {
                            *slot = ids[pos - 1].clone();
                        }
                        (answer, WindowStatus::Reordered)
                    }
                }
            }
        };
        windows.push(WindowOutcome {
            range: (start, end),
            input_ids: ids,
            answer,
            status,
            attempts,
        });
    }

    Ok(GlobalRanking {
        query_id: query.id.clone(),
        input_ids: input,
        ordered_candidate_ids: working,
        windows,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ScriptedPolicy, Strategy};
    use crate::store::{Candidate, Pool};
    use std::collections::{BTreeMap, BTreeSet};
    use std::sync::Arc;

    #[test]
    fn plan_matches_four_calls() {
        let p = plan_windows(50, 20, 10).unwrap();
        assert_eq!(p.ranges, [(30, 50), (20, 40), (10, 30), (0, 20)]);
    }

    #[test]
    fn plan_short_and_clamped() {
        assert_eq!(plan_windows(10, 20, 10).unwrap().ranges, [(0, 10)]);
        assert_eq!(plan_windows(25, 20, 10).unwrap().ranges, [(5, 25), (0, 20)]);
        assert_eq!(plan_windows(20, 20, 10).unwrap().ranges, [(0, 20)]);
    }

    #[test]
    fn plan_errors() {
        assert_eq!(
            plan_windows(50, 10, 20),
            Err(RerankError::StrideExceedsWindow {
                stride: 20,
                window: 10
            })
        );
        assert!(plan_windows(0, 20, 10).is_err());
        assert!(plan_windows(5, 0, 0).is_err());
        assert!(plan_windows(5, 2, 0).is_err());
    }

    fn setup(n: usize) -> (Pool, Vec<RetrievalHit>) {
        let cands: Vec<_> = (1..=n)
            .map(|i| Candidate::text(format!("h{i}"), format!("doc {i}")))
            .collect();
        let hits = cands
            .iter()
            .map(|c| RetrievalHit {
                candidate_id: c.id.clone(),
                score: 0.0,
            })
            .collect();
        (Pool::new(cands).unwrap(), hits)
    }

    fn ids(r: &GlobalRanking) -> Vec<&str> {
        r.ordered_candidate_ids.iter().map(String::as_str).collect()
    }

    #[test]
    fn single_window_direct_permutation() {
        let (pool, hits) = setup(3);
        let engine = Engine::new(Arc::new(ScriptedPolicy::new(Strategy::Turns {
            turns: vec!["<think>t</think><answer>2,1,3</answer>".into()],
        })));
        let runner = PoolRunner {
            pool: &pool,
            engine: &engine,
        };
        let plan = plan_windows(3, 20, 10).unwrap();
        let r = rerank_sliding(&Query::text("q", "x"), &hits, &runner, &plan, 0).unwrap();
        assert_eq!(ids(&r), ["h2", "h1", "h3"]);
    }

    #[test]
    fn identity_is_fixed_point() {
        let (pool, hits) = setup(50);
        let engine = Engine::new(Arc::new(ScriptedPolicy::new(Strategy::Identity)));
        let runner = PoolRunner {
            pool: &pool,
            engine: &engine,
        };
        let plan = plan_windows(50, 20, 10).unwrap();
        let r = rerank_sliding(&Query::text("q", "x"), &hits, &runner, &plan, 0).unwrap();
        assert_eq!(r.ordered_candidate_ids, r.input_ids);
        assert_eq!(r.windows.len(), 4);
    }

    #[test]
    fn oracle_carries_last_to_first() {
        let (pool, hits) = setup(50);
        let mut relevant = BTreeMap::new();
        relevant.insert("q".to_owned(), BTreeSet::from(["h50".to_owned()]));
        let engine = Engine::new(Arc::new(ScriptedPolicy::new(Strategy::Oracle { relevant })));
        let runner = PoolRunner {
            pool: &pool,
            engine: &engine,
        };
        let plan = plan_windows(50, 20, 10).unwrap();
        let r = rerank_sliding(&Query::text("q", "x"), &hits, &runner, &plan, 0).unwrap();
        assert_eq!(r.ordered_candidate_ids[0], "h50");
        // 1-based position of the ground truth entering each window: 50 -> 31 -> 21 -> 11 -> 1.
        let positions: Vec<usize> = r
            .windows
            .iter()
            .map(|w| w.range.0 + w.answer.as_ref().unwrap().as_slice()[0])
            .collect();
        assert_eq!(positions, [50, 31, 21, 11]);
    }

    #[test]
    fn failures_leave_order_and_retry() {
        let (_, hits) = setup(25);
        let calls = std::sync::atomic::AtomicU32::new(0);
        let runner = |_: &Query, _: &[String]| -> Result<Episode, EngineError> {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Err(EngineError::Limits("boom".into()))
        };
        let plan = plan_windows(25, 20, 10).unwrap();
        let r = rerank_sliding(&Query::text("q", "x"), &hits, &runner, &plan, 2).unwrap();
        assert_eq!(r.ordered_candidate_ids, r.input_ids);
        assert_eq!(r.failed_windows(), 2);
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 6);
    }

    #[test]
    fn plan_mismatch() {
        let (_, hits) = setup(5);
        let runner = |_: &Query, _: &[String]| -> Result<Episode, EngineError> {
            unreachable!()
        };
        let plan = plan_windows(6, 20, 10).unwrap();
        assert_eq!(
            rerank_sliding(&Query::text("q", "x"), &hits, &runner, &plan, 0).unwrap_err(),
            RerankError::PlanMismatch { plan: 6, hits: 5 }
        );
    }
}
