//! Batch commands over files: retrieve, rerank, score, filter, eval, bench and replay.
//!
//! Every command reads its inputs from paths, writes line-delimited JSON into
//! the output directory and returns a [`Summary`] of per-item failures. Outputs
//! are written in input order, so runs with scripted or replay backends are
//! byte-identical.

pub mod config;

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use mier_core::eapo::{
    ground_truth_position, group_advantages, reward_total, rsft_verdict, RewardBreakdown,
    RsftReport,
};
use mier_core::engine::{Engine, TrajectoryLogRecord};
use mier_core::eval::{assemble_report, score_all, BenchmarkReport, QueryResult, QueryRow, RunMeta};
use mier_core::jsonl;
use mier_core::policy::{
    HttpPolicy, HttpSettings, PolicyBackend, ReplayPolicy, ScriptedPolicy, Strategy,
};
use mier_core::protocol::PromptTemplate;
use mier_core::rerank::{plan_windows, rerank_sliding, PoolRunner, WindowOutcome};
use mier_core::store::{cosine_topk, read_queries, EmbeddingMatrix, Pool, Query, RetrievalHit};
use mier_core::tools::VisualTools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{EngineConfig, Overrides, PolicySpec};

pub const HITS_FILE: &str = "hits.jsonl";
pub const RANKINGS_FILE: &str = "rankings.jsonl";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const SCORED_FILE: &str = "scored.jsonl";
pub const RSFT_FILE: &str = "rsft.jsonl";
pub const RSFT_REPORT_FILE: &str = "rsft_report.json";
pub const REPORT_FILE: &str = "report.jsonl";

/// Per-item outcome counts for a command.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Summary {
    pub items: usize,
    pub failures: usize,
}

impl Summary {
    pub fn ok(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitsRecord {
    pub query_id: String,
    pub config_hash: String,
    pub hits: Vec<RetrievalHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub query_id: String,
    pub config_hash: String,
    pub policy: String,
    pub input_order: Vec<String>,
    pub final_order: Vec<String>,
    pub windows: Vec<WindowOutcome>,
}

impl RankingRecord {
    pub fn failed_windows(&self) -> usize {
        self.windows
            .iter()
            .filter(|w| matches!(w.status, mier_core::rerank::WindowStatus::Failed { .. }))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub config_hash: String,
    /// Index of the (query, window) group in first-appearance order.
    pub group: usize,
    pub gt_window_pos: Option<usize>,
    pub reward: RewardBreakdown,
    /// Absent when the group has fewer than two trajectories.
    pub advantage: Option<f64>,
    pub record: TrajectoryLogRecord,
}

/// A single summary line appended after the per-query report rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummaryLine {
    pub summary: BenchmarkReport,
}

pub fn out_path(cfg: &EngineConfig, name: &str) -> PathBuf {
    cfg.output.dir.join(name)
}

fn ensure_out_dir(cfg: &EngineConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.output.dir)
        .with_context(|| format!("creating output directory {}", cfg.output.dir.display()))
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> anyhow::Result<&'a Path> {
    p.as_deref()
        .with_context(|| format!("config error: no {what} path configured"))
}

pub fn load_queries(cfg: &EngineConfig) -> anyhow::Result<Vec<Query>> {
    let path = required(&cfg.data.queries, "query manifest")?;
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_queries(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// Loads the candidate pool, attaching embeddings when asked.
pub fn load_pool(cfg: &EngineConfig, with_embeddings: bool) -> anyhow::Result<Pool> {
    let path = required(&cfg.data.pool, "pool manifest")?;
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let pool = Pool::ingest(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    if !with_embeddings {
        return Ok(pool);
    }
    let path = required(&cfg.data.embeddings, "embedding file")?;
    let matrix = read_matrix(path)?;
    pool.with_embeddings(matrix)
        .with_context(|| format!("attaching {}", path.display()))
}

fn read_matrix(path: &Path) -> anyhow::Result<EmbeddingMatrix> {
    let f = File::open(path)
        .with_context(|| format!("config error: cannot open embeddings {}", path.display()))?;
    EmbeddingMatrix::read_from(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

pub fn load_query_matrix(cfg: &EngineConfig) -> anyhow::Result<Option<EmbeddingMatrix>> {
    cfg.data.query_embeddings.as_deref().map(read_matrix).transpose()
}

/// Builds the configured policy. An oracle script without relevance sets
/// takes them from the query manifest.
pub fn build_policy(cfg: &EngineConfig, queries: &[Query]) -> anyhow::Result<Arc<dyn PolicyBackend>> {
    Ok(match cfg.policy_spec()? {
        PolicySpec::Scripted(path) => {
            let mut p = ScriptedPolicy::load(&path).map_err(anyhow::Error::msg)?;
            if let Strategy::Oracle { relevant } = &mut p.strategy {
                if relevant.is_empty() {
                    relevant.extend(
                        queries
                            .iter()
                            .map(|q| (q.id.clone(), q.gt_candidate_ids.clone())),
                    );
                }
            }
            Arc::new(p)
        }
        PolicySpec::Replay(path) => {
            let records: Vec<TrajectoryLogRecord> =
                jsonl::read_file(&path).with_context(|| format!("reading {}", path.display()))?;
            Arc::new(ReplayPolicy::new(records.into_iter().map(|r| {
                (
                    r.trajectory.query_id,
                    r.trajectory.window_candidate_ids,
                    r.trajectory.raw_turns,
                )
            })))
        }
        PolicySpec::Http => {
            let p = &cfg.policy;
            Arc::new(HttpPolicy::new(HttpSettings {
                endpoint: p.endpoint.clone(),
                model: p.model.clone(),
                temperature: p.temperature,
                max_tokens: p.max_tokens,
                retries: p.retries,
                timeout: Duration::from_secs(cfg.limits.turn_timeout_secs),
                token: std::env::var(&p.token_env).ok().filter(|t| !t.is_empty()),
                seed: Some(cfg.run.seed),
                image_root: cfg.data.image_root.clone(),
            })?)
        }
    })
}

/// An engine with the configured template, tools and limits around `policy`.
pub fn build_engine(cfg: &EngineConfig, policy: Arc<dyn PolicyBackend>) -> anyhow::Result<Engine> {
    let template = match (&cfg.templates.system, &cfg.templates.user) {
        (Some(s), Some(u)) => PromptTemplate::load(s, u).context("loading templates")?,
        _ => PromptTemplate::default(),
    };
    template.validate().context("invalid prompt template")?;
    Ok(Engine::new(policy)
        .with_template(template)
        .with_tools(VisualTools::new(cfg.data.image_root.clone()))
        .with_limits(cfg.limits)
        .with_observation_role(cfg.policy.observation_role))
}

fn worker_pool(cfg: &EngineConfig) -> anyhow::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.parallelism)
        .build()
        .context("building worker pool")
}

/// Runs the coarse stage for every query and writes `hits.jsonl`.
pub fn cmd_retrieve(cfg: &EngineConfig) -> anyhow::Result<Summary> {
    cfg.validate()?;
    let pool = load_pool(cfg, true)?;
    let queries = load_queries(cfg)?;
    let qmatrix = load_query_matrix(cfg)?;
    let hash = cfg.hash();
    let results: Vec<_> = worker_pool(cfg)?.install(|| {
        queries
            .par_iter()
            .map(|q| {
                q.vector(qmatrix.as_ref())
                    .and_then(|v| cosine_topk(v, &pool, cfg.rerank.k_top))
                    .map(|hits| HitsRecord {
                        query_id: q.id.clone(),
                        config_hash: hash.clone(),
                        hits,
                    })
                    .map_err(|e| (q.id.clone(), e))
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = 0;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err((id, e)) => {
                log::error!("query {id:?}: {e}");
                failures += 1;
            }
        }
    }
    ensure_out_dir(cfg)?;
    jsonl::write_file(&out_path(cfg, HITS_FILE), &records)?;
    Ok(Summary {
        items: queries.len(),
        failures,
    })
}

struct Reranked {
    ranking: RankingRecord,
    log: Vec<TrajectoryLogRecord>,
}

/// Reranks every hit list and writes `rankings.jsonl` and `trajectories.jsonl`.
pub fn cmd_rerank(cfg: &EngineConfig, hits_path: &Path) -> anyhow::Result<Summary> {
    cfg.validate()?;
    let pool = load_pool(cfg, false)?;
    let queries = load_queries(cfg)?;
    let by_id: HashMap<&str, &Query> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let hits: Vec<HitsRecord> =
        jsonl::read_file(hits_path).with_context(|| format!("reading {}", hits_path.display()))?;
    let engine = build_engine(cfg, build_policy(cfg, &queries)?)?;
    let policy = engine.policy.identity();
    let hash = cfg.hash();
    let runner = PoolRunner {
        pool: &pool,
        engine: &engine,
    };

    let rerank_one = |rec: &HitsRecord| -> anyhow::Result<Reranked> {
        let query = by_id
            .get(rec.query_id.as_str())
            .with_context(|| format!("query {:?} is not in the query manifest", rec.query_id))?;
        let list = &rec.hits[..rec.hits.len().min(cfg.rerank.k_top)];
        let plan = plan_windows(list.len(), cfg.rerank.window, cfg.rerank.stride)?;
        let ranking = rerank_sliding(query, list, &runner, &plan, cfg.rerank.window_retries)?;
        let mut log = Vec::with_capacity(ranking.episodes.len());
        for (ids, ep) in &ranking.episodes {
            let window = pool.resolve(ids)?;
            log.push(engine.log_record(query, &window, ep.clone(), Some(hash.clone())));
        }
        Ok(Reranked {
            ranking: RankingRecord {
                query_id: ranking.query_id,
                config_hash: hash.clone(),
                policy: policy.clone(),
                input_order: ranking.input_ids,
                final_order: ranking.ordered_candidate_ids,
                windows: ranking.windows,
            },
            log,
        })
    };

    let results: Vec<_> =
        worker_pool(cfg)?.install(|| hits.par_iter().map(rerank_one).collect());
    let mut rankings = Vec::new();
    let mut log = Vec::new();
    let mut failures = 0;
    for (rec, r) in hits.iter().zip(results) {
        match r {
            Ok(r) => {
                let failed = r.ranking.failed_windows();
                if failed > 0 {
                    for w in &r.ranking.windows {
                        if let mier_core::rerank::WindowStatus::Failed { error } = &w.status {
                            log::error!("query {:?} window {:?}: {error}", rec.query_id, w.range);
                        }
                    }
                    failures += 1;
                }
                rankings.push(r.ranking);
                log.extend(r.log);
            }
            Err(e) => {
                log::error!("query {:?}: {e:#}", rec.query_id);
                failures += 1;
            }
        }
    }
    ensure_out_dir(cfg)?;
    jsonl::write_file(&out_path(cfg, RANKINGS_FILE), &rankings)?;
    jsonl::write_file(&out_path(cfg, TRAJECTORIES_FILE), &log)?;
    Ok(Summary {
        items: hits.len(),
        failures,
    })
}

/// Scores every logged trajectory and normalises advantages within each
/// (query, window) group. Writes `scored.jsonl`.
pub fn cmd_score(cfg: &EngineConfig, log_path: &Path) -> anyhow::Result<Summary> {
    cfg.validate()?;
    let records: Vec<TrajectoryLogRecord> =
        jsonl::read_file(log_path).with_context(|| format!("reading {}", log_path.display()))?;
    let manifest: HashMap<String, BTreeSet<String>> = match &cfg.data.queries {
        Some(_) => load_queries(cfg)?
            .into_iter()
            .map(|q| (q.id, q.gt_candidate_ids))
            .collect(),
        None => HashMap::new(),
    };
    let hash = cfg.hash();
    let mut group_of: HashMap<(String, Vec<String>), usize> = HashMap::new();
    let mut rows: Vec<ScoredRow> = Vec::new();
    let mut failures = 0;
    for rec in records {
        let qid = &rec.trajectory.query_id;
        let relevant = manifest
            .get(qid)
            .filter(|s| !s.is_empty())
            .unwrap_or(&rec.query.gt_candidate_ids);
        if relevant.is_empty() {
            log::error!("query {qid:?} has no ground truth; trajectory skipped");
            failures += 1;
            continue;
        }
        let gt_pos = ground_truth_position(&rec.trajectory, relevant);
        let reward = reward_total(&rec.trajectory, gt_pos, &cfg.eapo);
        let key = (qid.clone(), rec.trajectory.window_candidate_ids.clone());
        let next = group_of.len();
        let group = *group_of.entry(key).or_insert(next);
        rows.push(ScoredRow {
            config_hash: hash.clone(),
            group,
            gt_window_pos: gt_pos,
            reward,
            advantage: None,
            record: rec,
        });
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); group_of.len()];
    for (i, r) in rows.iter().enumerate() {
        members[r.group].push(i);
    }
    for (g, idx) in members.iter().enumerate() {
        if idx.len() < 2 {
            log::warn!(
                "group {g} (query {:?}) has {} trajectory; advantages skipped",
                rows[idx[0]].record.trajectory.query_id,
                idx.len()
            );
            continue;
        }
        if idx.len() != cfg.eapo.group_size {
            log::debug!("group {g} has {} trajectories, configured G is {}", idx.len(), cfg.eapo.group_size);
        }
        let rewards: Vec<f64> = idx.iter().map(|&i| rows[i].reward.total).collect();
        let adv = group_advantages(&rewards, &cfg.eapo)?;
        for (&i, a) in idx.iter().zip(adv.advantages) {
            rows[i].advantage = Some(a);
        }
    }
    ensure_out_dir(cfg)?;
    jsonl::write_file(&out_path(cfg, SCORED_FILE), &rows)?;
    Ok(Summary {
        items: rows.len() + failures,
        failures,
    })
}

/// Keeps scored rows that are format-perfect with the ground truth ranked
/// first. Writes `rsft.jsonl` and `rsft_report.json`.
pub fn cmd_filter(cfg: &EngineConfig, scored_path: &Path) -> anyhow::Result<(Summary, RsftReport)> {
    let rows: Vec<ScoredRow> =
        jsonl::read_file(scored_path).with_context(|| format!("reading {}", scored_path.display()))?;
    let verdicts: Vec<_> = rows.iter().map(|r| rsft_verdict(&r.reward)).collect();
    let report = RsftReport::from_verdicts(verdicts.iter().map(Vec::as_slice));
    let kept: Vec<&ScoredRow> = rows
        .iter()
        .zip(&verdicts)
        .filter(|(_, v)| v.is_empty())
        .map(|(r, _)| r)
        .collect();
    ensure_out_dir(cfg)?;
    jsonl::write_file(&out_path(cfg, RSFT_FILE), kept)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(out_path(cfg, RSFT_REPORT_FILE), text)?;
    Ok((
        Summary {
            items: rows.len(),
            failures: 0,
        },
        report,
    ))
}

/// Scores rankings against the ground truth and writes `report.jsonl`: one
/// row per query followed by a summary line.
pub fn cmd_eval(cfg: &EngineConfig, rankings_path: &Path) -> anyhow::Result<(Summary, BenchmarkReport)> {
    cfg.validate()?;
    let queries = load_queries(cfg)?;
    let rankings: Vec<RankingRecord> = jsonl::read_file(rankings_path)
        .with_context(|| format!("reading {}", rankings_path.display()))?;
    let known: HashMap<&str, &Query> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut by_id: HashMap<&str, &RankingRecord> = HashMap::new();
    for r in &rankings {
        if !known.contains_key(r.query_id.as_str()) {
            bail!("query id mismatch: ranking for {:?} has no ground truth", r.query_id);
        }
        if by_id.insert(r.query_id.as_str(), r).is_some() {
            bail!("duplicate ranking for query {:?}", r.query_id);
        }
    }
    let metrics = &cfg.eval.metrics;
    let zeros = || metrics.iter().map(|m| (m.to_string(), 0.0)).collect();
    let mut rows = Vec::with_capacity(queries.len());
    for q in &queries {
        let mut row = QueryRow {
            query_id: q.id.clone(),
            first_stage: zeros(),
            reranked: zeros(),
            failed_windows: 0,
            error: None,
        };
        let score = |ids: &[String]| {
            QueryResult::new(q.id.clone(), ids.to_vec(), q.gt_candidate_ids.clone())
                .and_then(|r| score_all(&r, metrics))
        };
        match by_id.get(q.id.as_str()) {
            None => row.error = Some("no ranking".into()),
            Some(r) => {
                row.first_stage = score(&r.input_order)?;
                row.failed_windows = r.failed_windows();
                if row.failed_windows == 0 {
                    row.reranked = score(&r.final_order)?;
                }
            }
        }
        rows.push(row);
    }
    let meta = RunMeta {
        engine_version: mier_core::ENGINE_VERSION.to_owned(),
        policy: rankings
            .first()
            .map(|r| r.policy.clone())
            .unwrap_or_else(|| cfg.policy.backend.clone()),
        config_hash: Some(cfg.hash()),
        total_ms: None,
    };
    let report = assemble_report(rows, metrics, cfg.eval.exclude_failures, meta);
    ensure_out_dir(cfg)?;
    let path = out_path(cfg, REPORT_FILE);
    let mut text = String::new();
    for row in &report.rows {
        text.push_str(&jsonl::to_line(row));
        text.push('\n');
    }
    text.push_str(&jsonl::to_line(&ReportSummaryLine {
        summary: report.clone(),
    }));
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok((
        Summary {
            items: report.queries,
            failures: report.failed,
        },
        report,
    ))
}

/// Retrieve, rerank and evaluate in sequence through the output directory.
pub fn cmd_bench(cfg: &EngineConfig) -> anyhow::Result<(Summary, BenchmarkReport)> {
    let started = std::time::Instant::now();
    let retrieved = cmd_retrieve(cfg)?;
    let reranked = cmd_rerank(cfg, &out_path(cfg, HITS_FILE))?;
    let (evaluated, mut report) = cmd_eval(cfg, &out_path(cfg, RANKINGS_FILE))?;
    if matches!(cfg.policy_spec()?, PolicySpec::Http) {
        report.meta.total_ms = Some(started.elapsed().as_millis() as u64);
    }
    Ok((
        Summary {
            items: evaluated.items,
            failures: retrieved.failures.max(reranked.failures).max(evaluated.failures),
        },
        report,
    ))
}

/// Re-runs every logged episode from its raw turns and checks the trajectory
/// is reproduced exactly.
pub fn cmd_replay(cfg: &EngineConfig, log_path: &Path) -> anyhow::Result<Summary> {
    let records: Vec<TrajectoryLogRecord> =
        jsonl::read_file(log_path).with_context(|| format!("reading {}", log_path.display()))?;
    let engine = build_engine(cfg, Arc::new(ReplayPolicy::default()))?;
    let mut failures = 0;
    for (i, rec) in records.iter().enumerate() {
        if let Err(e) = engine.replay_episode(rec) {
            log::error!("record {} (query {:?}): {e}", i + 1, rec.trajectory.query_id);
            failures += 1;
        }
    }
    Ok(Summary {
        items: records.len(),
        failures,
    })
}
