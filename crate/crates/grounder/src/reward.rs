//! Rollout scoring: the accuracy + format-compliance reward, group-relative
//! advantages for policy-gradient batches, and correct-rollout filtering for
//! consistency-data construction.

use crate::geometry::{point_in_bbox, BBox, PixelCoord};
use crate::predictor::{extract_think_span, parse_model_output};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("group-relative scoring needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
}

/// One scored model rollout against its record's ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub query_id: String,
    pub raw: String,
    pub reasoning: String,
    /// None when the raw output had no parseable coordinate.
    pub coord: Option<PixelCoord>,
    pub gt: BBox,
}

impl Rollout {
    pub fn from_raw(query_id: impl Into<String>, raw: impl Into<String>, gt: BBox) -> Self {
        let raw = raw.into();
        let (reasoning, coord) = match parse_model_output(&raw) {
            Some((r, c)) => (r, Some(c)),
            None => (
                extract_think_span(&raw)
                    .map(|(r, _)| r.to_string())
                    .unwrap_or_default(),
                None,
            ),
        };
        Self {
            query_id: query_id.into(),
            raw,
            reasoning,
            coord,
            gt,
        }
    }

    pub fn in_gt(&self) -> bool {
        self.coord.map(|c| point_in_bbox(c, &self.gt)).unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Weight of the format-compliance bonus.
    pub lambda: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupScores {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// True iff the reasoning portion is wrapped in exactly one outermost
/// well-formed, non-empty `<think>...</think>` pair preceding the coordinate
/// position.
pub fn format_check(raw: &str) -> bool {
    let open_count = raw.matches("<think>").count();
    let close_count = raw.matches("</think>").count();
    if open_count != 1 || close_count != 1 {
        return false;
    }
    match extract_think_span(raw) {
        Some((inner, _)) if !inner.trim().is_empty() => {
            // the single open tag must start the output (nothing but
            // whitespace before it)
            raw[..raw.find("<think>").unwrap()].trim().is_empty()
        }
        _ => false,
    }
}

/// Accuracy indicator plus the lambda-weighted format bonus. Rollouts without
/// a parseable coordinate score 0 on the accuracy term but may still earn the
/// format bonus; the two indicators are independent.
pub fn grounding_reward(rollout: &Rollout, cfg: &RewardConfig) -> f64 {
    let hit = if rollout.in_gt() { 1.0 } else { 0.0 };
    let fmt = if format_check(&rollout.raw) { 1.0 } else { 0.0 };
    hit + cfg.lambda * fmt
}

/// Standardize rewards within a group: (r - mean) / (population std + eps).
/// An all-equal group yields all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Result<GroupScores, RewardError> {
    if rewards.len() < 2 {
        return Err(RewardError::GroupTooSmall(rewards.len()));
    }
    // An all-equal group carries no ranking signal; short-circuit to exact
    // zeros rather than dividing float residue of the mean by epsilon.
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(GroupScores {
            rewards: rewards.to_vec(),
            advantages: vec![0.0; rewards.len()],
        });
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let eps = 1e-8;
    let advantages = rewards.iter().map(|r| (r - mean) / (std + eps)).collect();
    Ok(GroupScores {
        rewards: rewards.to_vec(),
        advantages,
    })
}

/// Keep only rollouts whose coordinate lands inside the ground-truth box,
/// preserving order.
pub fn filter_correct_rollouts(rollouts: &[Rollout]) -> Vec<Rollout> {
    rollouts.iter().filter(|r| r.in_gt()).cloned().collect()
}

/// One line of the rollout-score JSONL consumed by an external trainer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutScore {
    pub query_id: String,
    pub raw: String,
    pub coord: Option<[f64; 2]>,
    pub in_gt: bool,
    pub format_ok: bool,
    pub reward: f64,
    pub advantage: Option<f64>,
}

/// Score a batch of rollouts and attach group-relative advantages per
/// query_id (groups of fewer than 2 rollouts get no advantage).
pub fn score_rollouts(rollouts: &[Rollout], cfg: &RewardConfig) -> Vec<RolloutScore> {
    let mut scores: Vec<RolloutScore> = rollouts
        .iter()
        .map(|r| RolloutScore {
            query_id: r.query_id.clone(),
            raw: r.raw.clone(),
            coord: r.coord.map(|c| [c.x, c.y]),
            in_gt: r.in_gt(),
            format_ok: format_check(&r.raw),
            reward: grounding_reward(r, cfg),
            advantage: None,
        })
        .collect();

    // group by query_id preserving input order
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, s) in scores.iter().enumerate() {
        match groups.iter_mut().find(|(id, _)| *id == s.query_id) {
            Some((_, idxs)) => idxs.push(i),
            None => groups.push((s.query_id.clone(), vec![i])),
        }
    }
    for (_, idxs) in &groups {
        if idxs.len() < 2 {
            continue;
        }
        let rewards: Vec<f64> = idxs.iter().map(|&i| scores[i].reward).collect();
        let adv = group_advantages(&rewards).expect("group size checked");
        for (k, &i) in idxs.iter().enumerate() {
            scores[i].advantage = Some(adv.advantages[k]);
        }
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt() -> BBox {
        BBox::new(0.0, 0.0, 10.0, 10.0)
    }

    #[test]
    fn format_check_examples() {
        assert!(format_check("<think>a</think>(1,2)"));
        assert!(!format_check("(1,2)"));
        assert!(!format_check("<think>a(1,2)"));
        assert!(!format_check("<think></think>(1,2)"));
        assert!(!format_check("<think>a</think><think>b</think>(1,2)"));
        assert!(!format_check("preface <think>a</think>(1,2)"));
    }

    #[test]
    fn reward_four_cases() {
        let cfg = RewardConfig::default();
        let hit_fmt = Rollout::from_raw("q", "<think>a</think>(5,5)", gt());
        assert!((grounding_reward(&hit_fmt, &cfg) - 1.1).abs() < 1e-12);
        let hit_nofmt = Rollout::from_raw("q", "(5,5)", gt());
        assert!((grounding_reward(&hit_nofmt, &cfg) - 1.0).abs() < 1e-12);
        let miss_fmt = Rollout::from_raw("q", "<think>a</think>(50,50)", gt());
        assert!((grounding_reward(&miss_fmt, &cfg) - 0.1).abs() < 1e-12);
        let miss_nofmt = Rollout::from_raw("q", "nothing here", gt());
        assert_eq!(grounding_reward(&miss_nofmt, &cfg), 0.0);
    }

    #[test]
    fn parse_failure_can_still_earn_format_bonus() {
        let r = Rollout::from_raw("q", "<think>looked around</think> no coords", gt());
        assert!(r.coord.is_none());
        assert!((grounding_reward(&r, &RewardConfig::default()) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn advantages_two_element_group() {
        let s = group_advantages(&[1.1, 0.1]).unwrap();
        // mean 0.6, population std 0.5
        assert!((s.advantages[0] - 1.0).abs() < 1e-7);
        assert!((s.advantages[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn advantages_degenerate_group_is_zero() {
        let s = group_advantages(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.advantages, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn advantages_sum_to_zero() {
        let s = group_advantages(&[0.0, 1.0]).unwrap();
        assert!(s.advantages.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn advantages_group_too_small() {
        assert_eq!(group_advantages(&[1.0]), Err(RewardError::GroupTooSmall(1)));
    }

    #[test]
    fn advantage_shift_invariance_and_scale_equivariance() {
        let base = [0.1, 1.1, 0.0, 1.0];
        let shifted: Vec<f64> = base.iter().map(|r| r + 5.0).collect();
        let a = group_advantages(&base).unwrap();
        let b = group_advantages(&shifted).unwrap();
        for (x, y) in a.advantages.iter().zip(&b.advantages) {
            assert!((x - y).abs() < 1e-7);
        }
        let scaled: Vec<f64> = base.iter().map(|r| r * 3.0).collect();
        let c = group_advantages(&scaled).unwrap();
        // standardization cancels positive scaling up to the eps guard
        for (x, y) in a.advantages.iter().zip(&c.advantages) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn filter_preserves_order_and_is_idempotent() {
        let rollouts = vec![
            Rollout::from_raw("q", "(5,5)", gt()),
            Rollout::from_raw("q", "(50,50)", gt()),
            Rollout::from_raw("q", "(1,1)", gt()),
            Rollout::from_raw("q", "junk", gt()),
        ];
        let kept = filter_correct_rollouts(&rollouts);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].raw, "(5,5)");
        assert_eq!(kept[1].raw, "(1,1)");
        assert_eq!(filter_correct_rollouts(&kept), kept);
        assert!(filter_correct_rollouts(&[]).is_empty());
        let misses = vec![Rollout::from_raw("q", "(50,50)", gt())];
        assert!(filter_correct_rollouts(&misses).is_empty());
    }

    #[test]
    fn score_rollouts_groups_by_query() {
        let rollouts = vec![
            Rollout::from_raw("a", "<think>x</think>(5,5)", gt()),
            Rollout::from_raw("a", "(50,50)", gt()),
            Rollout::from_raw("b", "(5,5)", gt()),
        ];
        let scores = score_rollouts(&rollouts, &RewardConfig::default());
        assert_eq!(scores.len(), 3);
        assert!(scores[0].advantage.unwrap() > 0.0);
        assert!(scores[1].advantage.unwrap() < 0.0);
        assert!(scores[2].advantage.is_none());
    }

    #[test]
    fn format_implies_nonempty_reasoning() {
        for raw in [
            "<think>a</think>(1,2)",
            "<think>long reasoning</think> [4, 5]",
            "  <think>x</think> 9, 9",
        ] {
            assert!(format_check(raw));
            let (span, _) = extract_think_span(raw).unwrap();
            assert!(!span.trim().is_empty());
        }
    }
}
