//! Trajectory rewards, group-normalised advantages, the scalar policy
//! objective and the rejection-sampling filter.
//!
//! ```text
//! R        = alpha * r_format + beta * r_rank + r_tool
//! r_format = 0.5 * [tag_valid] + 0.5 * [list_valid]
//! r_rank   = exp(-(k-1)^2 / (2 sigma^2))   if the answer is valid and k <= K_r, else 0
//! r_tool   = eta * [k = 1] * [N_tool > 0] - rho * max(0, N_tool - tau)
//! A_i      = (R_i - mean(R)) / max(std(R), eps)          (population std)
//! J        = (1/G) * sum_i ratio_i * A_i - lambda * KL
//! ```
//!
//! `k` is the 1-based rank of the ground-truth candidate in the normalised
//! answer and `N_tool` counts successful tool executions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::Trajectory;
use crate::protocol::RankList;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EapoError {
    #[error("a group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite reward at index {0}")]
    NonFiniteReward(usize),
    #[error("{ratios} ratios but {advantages} advantages")]
    LengthMismatch { ratios: usize, advantages: usize },
    #[error("ratio {value} at index {index} is not positive")]
    NonPositiveRatio { index: usize, value: f64 },
    #[error("empty group")]
    Empty,
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EapoConfig {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub k_r: usize,
    pub eta: f64,
    pub rho: f64,
    pub tau_tol: u32,
    pub lambda_kl: f64,
    pub group_size: usize,
    pub std_epsilon: f64,
}

impl Default for EapoConfig {
    fn default() -> Self {
        EapoConfig {
            alpha: 0.2,
            beta: 0.8,
            sigma: 1.0,
            k_r: 5,
            eta: 0.2,
            rho: 0.1,
            tau_tol: 1,
            lambda_kl: 0.0,
            group_size: 8,
            std_epsilon: 1e-8,
        }
    }
}

impl EapoConfig {
    pub fn validate(&self) -> Result<(), EapoError> {
        let err = |m: &str| Err(EapoError::Config(m.to_owned()));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return err("sigma must be positive");
        }
        if self.k_r == 0 {
            return err("k_r must be positive");
        }
        if self.group_size == 0 {
            return err("group_size must be positive");
        }
        if self.std_epsilon.is_nan() || self.std_epsilon <= 0.0 {
            return err("std_epsilon must be positive");
        }
        if self.rho < 0.0 || self.lambda_kl < 0.0 {
            return err("rho and lambda_kl must be nonnegative");
        }
        if ![self.alpha, self.beta, self.eta, self.rho, self.lambda_kl]
            .iter()
            .all(|v| v.is_finite())
        {
            return err("weights must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_rank: f64,
    pub r_tool: f64,
    pub total: f64,
    pub gt_rank_k: Option<usize>,
    pub n_tool: u32,
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn format_reward(tag_valid: bool, list_valid: bool) -> f64 {
    0.5 * indicator(tag_valid) + 0.5 * indicator(list_valid)
}

pub fn reward_format(traj: &Trajectory) -> f64 {
    format_reward(traj.tag_valid, traj.list_valid)
}

/// Soft rank reward for a 1-based rank `k`; `None` means no valid answer.
pub fn rank_reward(k: Option<usize>, cfg: &EapoConfig) -> f64 {
    match k {
        Some(k) if k >= 1 && k <= cfg.k_r => {
            let d = (k - 1) as f64;
            (-(d * d) / (2.0 * cfg.sigma * cfg.sigma)).exp()
        }
        _ => 0.0,
    }
}

pub fn reward_rank(answer: Option<&RankList>, gt_window_pos: usize, cfg: &EapoConfig) -> f64 {
    rank_reward(answer.and_then(|a| a.rank_of(gt_window_pos)), cfg)
}

pub fn reward_tool(n_tool: u32, k: Option<usize>, cfg: &EapoConfig) -> f64 {
    let bonus = cfg.eta * indicator(k == Some(1)) * indicator(n_tool > 0);
    let excess = n_tool.saturating_sub(cfg.tau_tol);
    bonus - cfg.rho * f64::from(excess)
}

/// Scores one trajectory. `gt_window_pos` is the 1-based window position of the
/// ground truth, or `None` when it is not in the window.
pub fn reward_total(
    traj: &Trajectory,
    gt_window_pos: Option<usize>,
    cfg: &EapoConfig,
) -> RewardBreakdown {
    let answer = traj.answer.as_ref().filter(|_| traj.list_valid);
    let k = gt_window_pos.and_then(|p| answer.and_then(|a| a.rank_of(p)));
    let r_format = reward_format(traj);
    let r_rank = rank_reward(k, cfg);
    let r_tool = reward_tool(traj.n_tool_valid, k, cfg);
    RewardBreakdown {
        r_format,
        r_rank,
        r_tool,
        total: cfg.alpha * r_format + cfg.beta * r_rank + r_tool,
        gt_rank_k: k,
        n_tool: traj.n_tool_valid,
    }
}

/// Window position of the relevant candidate the trajectory ranked best; with
/// no answer, the first relevant candidate in window order.
pub fn ground_truth_position(traj: &Trajectory, relevant: &BTreeSet<String>) -> Option<usize> {
    let positions = traj
        .window_candidate_ids
        .iter()
        .enumerate()
        .filter(|(_, id)| relevant.contains(*id))
        .map(|(i, _)| i + 1);
    match &traj.answer {
        Some(a) => positions.min_by_key(|&p| a.rank_of(p).unwrap_or(usize::MAX)),
        None => positions.min(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Normalises a group of rewards by its mean and population standard deviation.
pub fn group_advantages(rewards: &[f64], cfg: &EapoConfig) -> Result<AdvantageGroup, EapoError> {
    if rewards.len() < 2 {
        return Err(EapoError::GroupTooSmall(rewards.len()));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(EapoError::NonFiniteReward(i));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let all_equal = rewards.iter().all(|&r| r == rewards[0]);
    let advantages = if all_equal {
        vec![0.0; rewards.len()]
    } else {
        let denom = std.max(cfg.std_epsilon);
        rewards.iter().map(|r| (r - mean) / denom).collect()
    };
    Ok(AdvantageGroup {
        rewards: rewards.to_vec(),
        advantages,
        mean,
        std,
    })
}

/// Evaluates the unclipped group objective for externally supplied per-trajectory
/// probability ratios. No gradients are taken.
pub fn eapo_objective(
    ratios: &[f64],
    advantages: &[f64],
    kl: f64,
    cfg: &EapoConfig,
) -> Result<f64, EapoError> {
    if ratios.len() != advantages.len() {
        return Err(EapoError::LengthMismatch {
            ratios: ratios.len(),
            advantages: advantages.len(),
        });
    }
    if ratios.is_empty() {
        return Err(EapoError::Empty);
    }
    if let Some((index, &value)) = ratios
        .iter()
        .enumerate()
        .find(|(_, r)| !(**r > 0.0 && r.is_finite()))
    {
        return Err(EapoError::NonPositiveRatio { index, value });
    }
    let g = ratios.len() as f64;
    let surrogate = ratios
        .iter()
        .zip(advantages)
        .map(|(r, a)| r * a)
        .sum::<f64>()
        / g;
    Ok(surrogate - cfg.lambda_kl * kl)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// `r_format < 1`.
    Format,
    /// The ground truth was not ranked first.
    Rank,
}

/// Reasons a scored trajectory is rejected; empty means it is kept.
pub fn rsft_verdict(b: &RewardBreakdown) -> Vec<RejectReason> {
    let mut reasons = Vec::new();
    if b.r_format != 1.0 {
        reasons.push(RejectReason::Format);
    }
    if b.gt_rank_k != Some(1) {
        reasons.push(RejectReason::Rank);
    }
    reasons
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsftReport {
    pub total: usize,
    pub kept: usize,
    pub keep_rate: f64,
    /// Rejections per reason; a trajectory failing both is counted under each.
    pub rejected: BTreeMap<RejectReason, usize>,
}

impl RsftReport {
    pub fn from_verdicts<'a>(verdicts: impl IntoIterator<Item = &'a [RejectReason]>) -> Self {
        let mut total = 0;
        let mut kept = 0;
        let mut rejected = BTreeMap::new();
        for v in verdicts {
            total += 1;
            if v.is_empty() {
                kept += 1;
            }
            for r in v {
                *rejected.entry(*r).or_insert(0) += 1;
            }
        }
        RsftReport {
            total,
            kept,
            keep_rate: if total == 0 {
                0.0
            } else {
                kept as f64 / total as f64
            },
            rejected,
        }
    }
}

/// Keeps trajectories that are format-perfect and rank the ground truth first.
/// Returns the indices of kept items and a report.
pub fn rsft_filter(
    items: &[(Trajectory, Option<usize>)],
    cfg: &EapoConfig,
) -> (Vec<usize>, RsftReport) {
    let verdicts: Vec<Vec<RejectReason>> = items
        .iter()
        .map(|(t, gt)| rsft_verdict(&reward_total(t, *gt, cfg)))
        .collect();
    let kept = verdicts
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_empty())
        .map(|(i, _)| i)
        .collect();
    (kept, RsftReport::from_verdicts(verdicts.iter().map(Vec::as_slice)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::normalize_ranklist;
    use proptest::prelude::*;

    /// exp(-x) by its Taylor series, independent of `f64::exp`.
    fn exp_neg_series(x: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for n in 1..60 {
            term *= -x / n as f64;
            sum += term;
        }
        sum
    }

    pub(crate) fn traj(
        tag: bool,
        list: bool,
        answer: Option<Vec<usize>>,
        w: usize,
        n_tool: u32,
    ) -> Trajectory {
        Trajectory {
            query_id: "q".into(),
            window_candidate_ids: (1..=w).map(|i| format!("c{i}")).collect(),
            steps: Vec::new(),
            answer: answer.map(|a| normalize_ranklist(&a, w).unwrap()),
            raw_answer: None,
            tag_valid: tag,
            list_valid: list,
            n_tool_valid: n_tool,
            n_tool_calls: n_tool,
            turns_used: 1,
            raw_turns: Vec::new(),
        }
    }

    #[test]
    fn format_indicators() {
        assert_eq!(format_reward(true, true), 1.0);
        assert_eq!(format_reward(true, false), 0.5);
        assert_eq!(format_reward(false, true), 0.5);
        assert_eq!(format_reward(false, false), 0.0);
    }

    #[test]
    fn rank_reward_values() {
        let cfg = EapoConfig::default();
        assert_eq!(rank_reward(Some(1), &cfg), 1.0);
        // exp(-1/2), frozen from the series oracle below.
        let expected = 0.6065306597126334;
        assert!((exp_neg_series(0.5) - expected).abs() < 1e-15);
        assert!((rank_reward(Some(2), &cfg) - expected).abs() < 1e-12);
        assert!((rank_reward(Some(2), &cfg) - 0.6065306597).abs() < 1e-9);
        assert_eq!(rank_reward(Some(6), &cfg), 0.0);
        assert_eq!(rank_reward(None, &cfg), 0.0);
        for k in 1..=5 {
            let d = (k - 1) as f64;
            assert!((rank_reward(Some(k), &cfg) - exp_neg_series(d * d / 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn reward_rank_uses_answer_position() {
        let cfg = EapoConfig::default();
        let a = normalize_ranklist(&[3, 1], 4).unwrap(); // 3,1,2,4
        assert_eq!(reward_rank(Some(&a), 3, &cfg), 1.0);
        assert_eq!(reward_rank(Some(&a), 2, &cfg), rank_reward(Some(3), &cfg));
        assert_eq!(reward_rank(None, 1, &cfg), 0.0);
    }

    #[test]
    fn tool_reward_values() {
        let cfg = EapoConfig::default();
        assert!((reward_tool(1, Some(1), &cfg) - 0.2).abs() < 1e-15);
        assert!(reward_tool(3, Some(1), &cfg).abs() < 1e-12);
        assert_eq!(reward_tool(0, Some(2), &cfg), 0.0);
        assert_eq!(reward_tool(0, Some(1), &cfg), 0.0);
        assert!((reward_tool(2, Some(2), &cfg) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn total_reward_examples() {
        let cfg = EapoConfig::default();
        let perfect = traj(true, true, Some(vec![1, 2, 3]), 3, 1);
        let b = reward_total(&perfect, Some(1), &cfg);
        assert!((b.total - 1.2).abs() < 1e-12);
        assert_eq!(b.gt_rank_k, Some(1));

        let unanswered = traj(false, false, None, 3, 0);
        let b = reward_total(&unanswered, Some(1), &cfg);
        assert_eq!((b.r_rank, b.r_tool, b.total), (0.0, 0.0, 0.0));
        assert_eq!(b.gt_rank_k, None);

        let second = traj(true, true, Some(vec![2, 1, 3]), 3, 2);
        let b = reward_total(&second, Some(1), &cfg);
        assert_eq!(b.gt_rank_k, Some(2));
        let expected = 0.2 + 0.8 * 0.6065306597126334 - 0.1;
        assert!((b.total - expected).abs() < 1e-12);
        assert!((b.total - 0.58522).abs() < 1e-5);
    }

    #[test]
    fn gt_position_prefers_best_ranked_relevant() {
        let t = traj(true, true, Some(vec![3, 2, 1]), 3, 0);
        let rel = BTreeSet::from(["c1".to_owned(), "c3".to_owned()]);
        assert_eq!(ground_truth_position(&t, &rel), Some(3));
        let t = traj(true, true, None, 3, 0);
        assert_eq!(ground_truth_position(&t, &rel), Some(1));
        assert_eq!(ground_truth_position(&t, &BTreeSet::new()), None);
    }

    #[test]
    fn advantage_examples() {
        let cfg = EapoConfig::default();
        let g = group_advantages(&[1.2, 0.2, 0.2, 1.2], &cfg).unwrap();
        assert!((g.mean - 0.7).abs() < 1e-12);
        assert!((g.std - 0.5).abs() < 1e-12);
        for (a, e) in g.advantages.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((a - e).abs() < 1e-12);
        }
        let g = group_advantages(&[0.5; 4], &cfg).unwrap();
        assert_eq!(g.advantages, [0.0; 4]);
        let g = group_advantages(&[0.1; 3], &cfg).unwrap();
        assert_eq!(g.advantages, [0.0; 3]);
        assert_eq!(
            group_advantages(&[1.0], &cfg),
            Err(EapoError::GroupTooSmall(1))
        );
    }

    #[test]
    fn objective_examples() {
        let mut cfg = EapoConfig::default();
        let adv = [1.0, -1.0, -1.0, 1.0];
        assert_eq!(eapo_objective(&[1.0; 4], &adv, 0.0, &cfg).unwrap(), 0.0);
        assert!((eapo_objective(&[2.0, 1.0, 1.0, 1.0], &adv, 5.0, &cfg).unwrap() - 0.25).abs() < 1e-15);
        cfg.lambda_kl = 0.1;
        assert!((eapo_objective(&[2.0, 1.0, 1.0, 1.0], &adv, 2.0, &cfg).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(
            eapo_objective(&[1.0; 3], &adv, 0.0, &cfg),
            Err(EapoError::LengthMismatch { .. })
        ));
        assert!(matches!(
            eapo_objective(&[1.0, 0.0, 1.0, 1.0], &adv, 0.0, &cfg),
            Err(EapoError::NonPositiveRatio { index: 1, .. })
        ));
    }

    #[test]
    fn rsft_examples() {
        let cfg = EapoConfig::default();
        let items = vec![
            (traj(true, true, Some(vec![1, 2]), 2, 0), Some(1)),
            (traj(true, true, Some(vec![2, 1]), 2, 0), Some(1)),
            (traj(false, true, Some(vec![1, 2]), 2, 0), Some(1)),
        ];
        let (kept, report) = rsft_filter(&items, &cfg);
        assert_eq!(kept, [0]);
        assert_eq!(report.kept, 1);
        assert_eq!(report.rejected[&RejectReason::Rank], 1);
        assert_eq!(report.rejected[&RejectReason::Format], 1);
    }

    #[test]
    fn config_validation() {
        assert!(EapoConfig::default().validate().is_ok());
        let bad = EapoConfig {
            sigma: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn rank_reward_strictly_decreasing(sigma in 0.05f64..10.0, k_r in 2usize..30) {
            let cfg = EapoConfig { sigma, k_r, ..Default::default() };
            for k in 1..k_r {
                let (a, b) = (rank_reward(Some(k), &cfg), rank_reward(Some(k + 1), &cfg));
                // Underflow to zero is the only way to lose strictness.
                prop_assert!(a > b || (a == 0.0 && b == 0.0));
            }
        }

        #[test]
        fn tool_reward_nonincreasing_past_tolerance(tau in 0u32..5, n in 0u32..20, k in prop::option::of(1usize..5)) {
            let cfg = EapoConfig { tau_tol: tau, ..Default::default() };
            let start = tau.max(1);
            if n >= start {
                prop_assert!(reward_tool(n + 1, k, &cfg) <= reward_tool(n, k, &cfg));
            }
        }

        #[test]
        fn total_is_linear_in_format_and_rank(
            alpha in -2.0f64..2.0, beta in -2.0f64..2.0,
            tag: bool, list: bool, k in 1usize..8, n in 0u32..4,
        ) {
            let cfg = EapoConfig { alpha, beta, ..Default::default() };
            let mut order: Vec<usize> = (1..=8).collect();
            order.swap(0, k - 1);
            let t = traj(tag, list, Some(order), 8, n);
            let b = reward_total(&t, Some(k), &cfg);
            prop_assert_eq!(b.total, alpha * b.r_format + beta * b.r_rank + b.r_tool);
        }

        #[test]
        fn advantages_shift_and_scale_invariant(
            rewards in prop::collection::vec(-5.0f64..5.0, 2..16),
            shift in -10.0f64..10.0,
            scale in 0.1f64..10.0,
        ) {
            let cfg = EapoConfig::default();
            let base = group_advantages(&rewards, &cfg).unwrap();
            prop_assume!(base.std > 1e-6);
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
            let s = group_advantages(&shifted, &cfg).unwrap();
            let c = group_advantages(&scaled, &cfg).unwrap();
            for i in 0..rewards.len() {
                prop_assert!((s.advantages[i] - base.advantages[i]).abs() < 1e-9);
                prop_assert!((c.advantages[i] - base.advantages[i]).abs() < 1e-9);
            }
        }
    }
}
