//! Toy environments with discrete-text and hybrid action spaces.

mod offline;
mod pointreach;
mod textgrid;

use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rl::HybridAction;

pub use offline::{generate_offline, BehaviorPolicy, OfflineDataset};
pub use pointreach::{PointReach, PointReachConfig, PointReachTask, POINTREACH_ACTIONS};
pub use textgrid::{
    Cell, TextGrid, TextGridConfig, TextGridTask, STEP_PENALTY, SUCCESS_REWARD, TEXTGRID_ACTIONS,
};

/// Opaque, environment-encoded state identifier.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct StateId(pub u64);

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Static description of a task: action vocabulary and per-state views.
///
/// Providers and embedders only see this side of an environment.
pub trait Task: Send + Sync {
    fn name(&self) -> &'static str;

    fn action_names(&self) -> &[&'static str];

    fn n_actions(&self) -> usize {
        self.action_names().len()
    }

    fn action_index(&self, name: &str) -> Option<usize> {
        self.action_names().iter().position(|a| *a == name)
    }

    /// Goal-progress score of each symbolic action in `state`.
    fn progress_scores(&self, state: StateId) -> Result<Vec<f64>>;

    /// Fixed-template natural-language rendering of `state`.
    fn describe(&self, state: StateId) -> Result<String>;

    /// Numeric view of `state` used for cache keys.
    fn features(&self, state: StateId) -> Result<Vec<f64>>;

    fn feature_bounds(&self) -> Vec<(f64, f64)>;

    /// Dimension of the continuous action component (0 for discrete tasks).
    fn continuous_dim(&self) -> usize {
        0
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next: StateId,
    pub reward: f64,
    /// Reached a terminal state (success).
    pub done: bool,
    /// Ran out of steps without terminating.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn finished(&self) -> bool {
        self.done || self.truncated
    }
}

/// A stateful episode runner.
pub trait Environment {
    fn task(&self) -> Arc<dyn Task>;

    fn reset(&mut self, rng: &mut dyn RngCore) -> StateId;

    fn step(&mut self, action: &HybridAction) -> Result<StepOutcome>;

    fn state(&self) -> StateId;

    fn max_steps(&self) -> usize;

    /// Whether the current episode ended in success.
    fn succeeded(&self) -> bool;

    /// Greedy goal-directed action from the true current state.
    fn expert_action(&self) -> HybridAction;

    /// Uniformly random valid action.
    fn random_action(&self, rng: &mut dyn RngCore) -> HybridAction;
}
