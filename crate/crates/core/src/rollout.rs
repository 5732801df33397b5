//! Trajectory batches shared by the environments and the optimizer.

use serde::{Deserialize, Serialize};

use crate::safety::SafetyConstraint;

/// One policy decision and what followed from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: usize,
    /// Scaled observation features fed to actor and critic.
    pub obs: Vec<f64>,
    pub raw_action: Vec<f64>,
    /// Acceleration actually applied after the safety filter, m/s².
    pub filtered_action: [f64; 2],
    /// Maps the raw action to the nominal world acceleration:
    /// `u = Σ_j a_j·action_map[j] + action_offset`.
    pub action_map: Vec<[f64; 2]>,
    pub action_offset: [f64; 2],
    pub reward: f64,
    /// Discounted return from this step to the end of the rollout.
    pub ret: f64,
    pub advantage: f64,
    /// Safety constraints at action time, one per axis in use.
    pub constraints: Vec<SafetyConstraint>,
    pub done: bool,
    pub infeasible: bool,
}

impl StepRecord {
    /// Coefficient of raw-action component `j` in constraint `k`.
    pub fn constraint_coef(&self, k: usize, j: usize) -> f64 {
        let a = self.constraints[k].a;
        let m = self.action_map[j];
        a[0] * m[0] + a[1] * m[1]
    }

    /// Action-independent part of constraint `k`: `A·action_offset`.
    pub fn constraint_offset(&self, k: usize) -> f64 {
        let a = self.constraints[k].a;
        a[0] * self.action_offset[0] + a[1] * self.action_offset[1]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub index: usize,
    pub seed: u64,
    /// Randomized initial offset (host offset online, start frame offline).
    pub initial_offset: f64,
    /// Minimum ground-truth ego/other distance over every simulated tick, m.
    pub min_distance: f64,
    pub steps: usize,
    /// Ended before the requested rollout length.
    pub terminated_early: bool,
    pub reached_goal: bool,
    /// Time at which the ego passed the merge point, s.
    pub merge_time: Option<f64>,
    /// Simulator ticks whose realized CBF condition was evaluated.
    pub cbf_checks: usize,
    pub cbf_violations: usize,
    pub infeasible_ticks: usize,
    /// Mean ego tracking error (offline only), m.
    pub mean_tracking_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub steps: Vec<StepRecord>,
    pub episodes: Vec<EpisodeSummary>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of constraint rows per step (0 for an empty batch).
    pub fn constraint_count(&self) -> usize {
        self.steps.first().map_or(0, |s| s.constraints.len())
    }

    pub fn mean_reward(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.reward))
    }

    /// Mean undiscounted return per episode.
    pub fn mean_episode_return(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        let total: f64 = self.steps.iter().map(|s| s.reward).sum();
        total / self.episodes.len() as f64
    }

    pub fn mean_min_distance(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.min_distance))
    }

    pub fn cbf_violation_rate(&self) -> f64 {
        let checks: usize = self.episodes.iter().map(|e| e.cbf_checks).sum();
        let viol: usize = self.episodes.iter().map(|e| e.cbf_violations).sum();
        if checks == 0 {
            0.0
        } else {
            viol as f64 / checks as f64
        }
    }

    pub fn infeasibility_rate(&self) -> f64 {
        mean(self.steps.iter().map(|s| if s.infeasible { 1.0 } else { 0.0 }))
    }

    /// Fills `ret` with discounted rewards-to-go within each episode. Steps
    /// of one episode must be contiguous and in time order.
    pub fn compute_returns(&mut self, gamma: f64) {
        let mut running = 0.0;
        let mut current: Option<usize> = None;
        for step in self.steps.iter_mut().rev() {
            if current != Some(step.episode) || step.done {
                running = 0.0;
                current = Some(step.episode);
            }
            running = step.reward + gamma * running;
            step.ret = running;
        }
    }
}

pub(crate) fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
