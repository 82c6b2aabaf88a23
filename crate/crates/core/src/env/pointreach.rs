//! Point-mass reaching task in the unit square with hybrid actions.
//!
//! The symbolic part picks a compass direction and the continuous part
//! `u ∈ [0, 1]` scales the step length.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Environment, StateId, StepOutcome, Task};
use crate::error::{Error, Result};
use crate::rl::HybridAction;

pub const POINTREACH_ACTIONS: [&str; 4] = ["north", "south", "east", "west"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointReachConfig {
    pub goal: (f64, f64),
    pub tolerance: f64,
    pub max_steps: usize,
    /// Full step length at `u = 1`.
    pub step_size: f64,
    /// Cells per axis used for state ids.
    pub grid: usize,
}

impl Default for PointReachConfig {
    fn default() -> Self {
        Self {
            goal: (0.8, 0.8),
            tolerance: 0.05,
            max_steps: 40,
            step_size: 0.2,
            grid: 10,
        }
    }
}

impl PointReachConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let (gx, gy) = self.goal;
        if !(0.0..=1.0).contains(&gx) || !(0.0..=1.0).contains(&gy) {
            errs.push(format!("pointreach goal ({gx},{gy}) outside unit square"));
        }
        if !(self.tolerance > 0.0) {
            errs.push("pointreach.tolerance must be positive".into());
        }
        if self.max_steps == 0 {
            errs.push("pointreach.max_steps must be positive".into());
        }
        if !(self.step_size > 0.0) {
            errs.push("pointreach.step_size must be positive".into());
        }
        if self.grid == 0 {
            errs.push("pointreach.grid must be positive".into());
        }
        errs
    }
}

fn direction(a: usize) -> (f64, f64) {
    match a {
        0 => (0.0, 1.0),
        1 => (0.0, -1.0),
        2 => (1.0, 0.0),
        _ => (-1.0, 0.0),
    }
}

#[derive(Debug, Clone)]
pub struct PointReachTask {
    cfg: PointReachConfig,
}

impl PointReachTask {
    pub fn new(cfg: PointReachConfig) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PointReachConfig {
        &self.cfg
    }

    pub fn cell_of(&self, pos: (f64, f64)) -> StateId {
        let g = self.cfg.grid;
        let bx = ((pos.0 * g as f64) as usize).min(g - 1);
        let by = ((pos.1 * g as f64) as usize).min(g - 1);
        StateId((bx * g + by) as u64)
    }

    pub fn center(&self, id: StateId) -> Result<(f64, f64)> {
        let g = self.cfg.grid;
        let raw = id.0 as usize;
        if raw >= g * g {
            return Err(Error::UnknownState(id));
        }
        let w = 1.0 / g as f64;
        Ok((((raw / g) as f64 + 0.5) * w, ((raw % g) as f64 + 0.5) * w))
    }

    fn distance(&self, p: (f64, f64)) -> f64 {
        ((p.0 - self.cfg.goal.0).powi(2) + (p.1 - self.cfg.goal.1).powi(2)).sqrt()
    }

    fn moved(&self, p: (f64, f64), a: usize, u: f64) -> (f64, f64) {
        let (dx, dy) = direction(a);
        let len = self.cfg.step_size * u;
        (
            (p.0 + dx * len).clamp(0.0, 1.0),
            (p.1 + dy * len).clamp(0.0, 1.0),
        )
    }

    fn expert_from(&self, p: (f64, f64)) -> HybridAction {
        let (dx, dy) = (self.cfg.goal.0 - p.0, self.cfg.goal.1 - p.1);
        let (a, gap) = if dx.abs() >= dy.abs() {
            (if dx >= 0.0 { 2 } else { 3 }, dx.abs())
        } else {
            (if dy >= 0.0 { 0 } else { 1 }, dy.abs())
        };
        HybridAction::hybrid(a, vec![(gap / self.cfg.step_size).min(1.0)])
    }
}

impl Task for PointReachTask {
    fn name(&self) -> &'static str {
        "pointreach"
    }

    fn action_names(&self) -> &[&'static str] {
        &POINTREACH_ACTIONS
    }

    /// Distance reduction of a full step from the cell center, in step units.
    fn progress_scores(&self, state: StateId) -> Result<Vec<f64>> {
        let c = self.center(state)?;
        let here = self.distance(c);
        Ok((0..POINTREACH_ACTIONS.len())
            .map(|a| (here - self.distance(self.moved(c, a, 1.0))) / self.cfg.step_size)
            .collect())
    }

    fn describe(&self, state: StateId) -> Result<String> {
        let (x, y) = self.center(state)?;
        let (gx, gy) = self.cfg.goal;
        Ok(format!(
            "You are at ({x:.2},{y:.2}). Goal at ({gx:.2},{gy:.2})."
        ))
    }

    /// Goal displacement from the cell center.
    fn features(&self, state: StateId) -> Result<Vec<f64>> {
        let (x, y) = self.center(state)?;
        Ok(vec![self.cfg.goal.0 - x, self.cfg.goal.1 - y])
    }

    fn feature_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-1.0, 1.0), (-1.0, 1.0)]
    }

    fn continuous_dim(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone)]
pub struct PointReach {
    task: Arc<PointReachTask>,
    pos: (f64, f64),
    steps: usize,
    success: bool,
}

impl PointReach {
    pub fn new(cfg: PointReachConfig) -> Result<Self> {
        Ok(Self {
            task: Arc::new(PointReachTask::new(cfg)?),
            pos: (0.0, 0.0),
            steps: 0,
            success: false,
        })
    }

    pub fn layout(&self) -> &Arc<PointReachTask> {
        &self.task
    }

    pub fn position(&self) -> (f64, f64) {
        self.pos
    }

    pub fn reset_to(&mut self, pos: (f64, f64)) -> Result<()> {
        if !(0.0..=1.0).contains(&pos.0) || !(0.0..=1.0).contains(&pos.1) {
            return Err(Error::OutOfRange(format!("position {pos:?}")));
        }
        self.pos = pos;
        self.steps = 0;
        self.success = false;
        Ok(())
    }
}

impl Environment for PointReach {
    fn task(&self) -> Arc<dyn Task> {
        self.task.clone()
    }

    /// Uniform start outside the goal tolerance.
    fn reset(&mut self, rng: &mut dyn RngCore) -> StateId {
        loop {
            let p = (rng.gen::<f64>(), rng.gen::<f64>());
            if self.task.distance(p) >= self.task.cfg.tolerance {
                self.pos = p;
                break;
            }
        }
        self.steps = 0;
        self.success = false;
        self.state()
    }

    fn step(&mut self, action: &HybridAction) -> Result<StepOutcome> {
        if action.symbolic >= POINTREACH_ACTIONS.len() {
            return Err(Error::UnknownAction(action.symbolic.to_string()));
        }
        let u = match action.continuous.as_slice() {
            [u] if u.is_finite() && (0.0..=1.0).contains(u) => *u,
            [u] => return Err(Error::OutOfRange(format!("u = {u} not in [0, 1]"))),
            _ => return Err(Error::NoContinuousAction),
        };
        self.pos = self.task.moved(self.pos, action.symbolic, u);
        self.steps += 1;
        let dist = self.task.distance(self.pos);
        let done = dist < self.task.cfg.tolerance;
        self.success = done;
        Ok(StepOutcome {
            next: self.state(),
            reward: -dist + if done { 1.0 } else { 0.0 },
            done,
            truncated: !done && self.steps >= self.task.cfg.max_steps,
        })
    }

    fn state(&self) -> StateId {
        self.task.cell_of(self.pos)
    }

    fn max_steps(&self) -> usize {
        self.task.cfg.max_steps
    }

    fn succeeded(&self) -> bool {
        self.success
    }

    fn expert_action(&self) -> HybridAction {
        self.task.expert_from(self.pos)
    }

    fn random_action(&self, rng: &mut dyn RngCore) -> HybridAction {
        HybridAction::hybrid(
            rng.gen_range(0..POINTREACH_ACTIONS.len()),
            vec![rng.gen::<f64>()],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env_at(x: f64, y: f64, goal: (f64, f64)) -> PointReach {
        let mut e = PointReach::new(PointReachConfig {
            goal,
            ..Default::default()
        })
        .unwrap();
        e.reset_to((x, y)).unwrap();
        e
    }

    #[test]
    fn zero_u_does_not_move() {
        let mut e = env_at(0.3, 0.4, (0.8, 0.8));
        e.step(&HybridAction::hybrid(0, vec![0.0])).unwrap();
        assert_eq!(e.position(), (0.3, 0.4));
    }

    #[test]
    fn full_north_step() {
        let mut e = env_at(0.5, 0.5, (0.5, 0.9));
        let out = e.step(&HybridAction::hybrid(0, vec![1.0])).unwrap();
        assert!((e.position().1 - 0.7).abs() < 1e-12);
        assert!((out.reward + 0.2).abs() < 1e-12);
        assert!(!out.done);
    }

    #[test]
    fn reaching_goal_pays_bonus() {
        let mut e = env_at(0.5, 0.7, (0.5, 0.9));
        let out = e.step(&HybridAction::hybrid(0, vec![1.0])).unwrap();
        assert!(out.done);
        assert!(out.reward > 0.99);
    }

    #[test]
    fn rejects_bad_u() {
        let mut e = env_at(0.5, 0.5, (0.8, 0.8));
        assert!(e.step(&HybridAction::hybrid(0, vec![1.5])).is_err());
        assert!(e.step(&HybridAction::hybrid(0, vec![-0.1])).is_err());
        assert!(e.step(&HybridAction::discrete(0)).is_err());
    }

    #[test]
    fn clipped_to_unit_square() {
        let mut e = env_at(0.05, 0.05, (0.8, 0.8));
        e.step(&HybridAction::hybrid(3, vec![1.0])).unwrap();
        assert_eq!(e.position().0, 0.0);
    }

    #[test]
    fn expert_reaches_goal() {
        let mut e = env_at(0.1, 0.2, (0.8, 0.8));
        let mut done = false;
        for _ in 0..40 {
            let a = e.expert_action();
            if e.step(&a).unwrap().done {
                done = true;
                break;
            }
        }
        assert!(done);
    }
}
