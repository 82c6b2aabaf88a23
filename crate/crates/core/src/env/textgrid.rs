//! Key-and-door grid world rendered as fixed-template text.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Environment, StateId, StepOutcome, Task};
use crate::error::{Error, Result};
use crate::rl::{HybridAction, QTable};

pub const TEXTGRID_ACTIONS: [&str; 6] = ["north", "south", "east", "west", "pickup", "open"];

const NORTH: usize = 0;
const SOUTH: usize = 1;
const EAST: usize = 2;
const WEST: usize = 3;
const PICKUP: usize = 4;
const OPEN: usize = 5;

pub const STEP_PENALTY: f64 = -0.01;
pub const SUCCESS_REWARD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextGridConfig {
    pub size: usize,
    /// (row, col) of the key; row 0 is the northern edge.
    pub key: (usize, usize),
    pub door: (usize, usize),
    pub max_steps: usize,
}

impl Default for TextGridConfig {
    fn default() -> Self {
        Self {
            size: 5,
            key: (0, 4),
            door: (4, 0),
            max_steps: 60,
        }
    }
}

impl TextGridConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.size < 2 {
            errs.push(format!("textgrid.size must be >= 2, got {}", self.size));
        }
        for (name, (r, c)) in [("key", self.key), ("door", self.door)] {
            if r >= self.size || c >= self.size {
                errs.push(format!("textgrid.{name} ({r},{c}) lies outside the grid"));
            }
        }
        if self.key == self.door {
            errs.push("textgrid key and door must differ".into());
        }
        if self.max_steps == 0 {
            errs.push("textgrid.max_steps must be positive".into());
        }
        errs
    }
}

/// A decoded grid state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub has_key: bool,
}

/// Static layout of a grid; implements [`Task`].
#[derive(Debug, Clone)]
pub struct TextGridTask {
    cfg: TextGridConfig,
}

impl TextGridTask {
    pub fn new(cfg: TextGridConfig) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &TextGridConfig {
        &self.cfg
    }

    pub fn n_states(&self) -> usize {
        self.cfg.size * self.cfg.size * 2
    }

    pub fn encode(&self, cell: Cell) -> StateId {
        let n = self.cfg.size;
        StateId(((cell.row * n + cell.col) * 2 + cell.has_key as usize) as u64)
    }

    pub fn decode(&self, id: StateId) -> Result<Cell> {
        let n = self.cfg.size;
        let raw = id.0 as usize;
        if raw >= n * n * 2 {
            return Err(Error::UnknownState(id));
        }
        let pos = raw / 2;
        Ok(Cell {
            row: pos / n,
            col: pos % n,
            has_key: raw % 2 == 1,
        })
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> {
        (0..self.n_states() as u64).map(StateId)
    }

    fn subgoal(&self, has_key: bool) -> (usize, usize) {
        if has_key {
            self.cfg.door
        } else {
            self.cfg.key
        }
    }

    fn moved(&self, cell: Cell, action: usize) -> Cell {
        let last = self.cfg.size - 1;
        let mut next = cell;
        match action {
            NORTH => next.row = cell.row.saturating_sub(1),
            SOUTH => next.row = (cell.row + 1).min(last),
            EAST => next.col = (cell.col + 1).min(last),
            WEST => next.col = cell.col.saturating_sub(1),
            _ => {}
        }
        next
    }

    fn distance(a: (usize, usize), b: (usize, usize)) -> usize {
        a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
    }

    /// Deterministic transition: (next state, reward, terminal).
    pub fn transition(&self, state: StateId, action: usize) -> Result<(StateId, f64, bool)> {
        let cell = self.decode(state)?;
        if action >= TEXTGRID_ACTIONS.len() {
            return Err(Error::UnknownAction(action.to_string()));
        }
        let pos = (cell.row, cell.col);
        let next = match action {
            PICKUP if pos == self.cfg.key => Cell {
                has_key: true,
                ..cell
            },
            OPEN if pos == self.cfg.door && cell.has_key => {
                return Ok((state, SUCCESS_REWARD, true));
            }
            PICKUP | OPEN => cell,
            mv => self.moved(cell, mv),
        };
        Ok((self.encode(next), STEP_PENALTY, false))
    }

    /// Shortest-path action toward the current subgoal.
    pub fn expert_action(&self, state: StateId) -> Result<usize> {
        let cell = self.decode(state)?;
        let goal = self.subgoal(cell.has_key);
        Ok(if (cell.row, cell.col) == goal {
            if cell.has_key {
                OPEN
            } else {
                PICKUP
            }
        } else if cell.row > goal.0 {
            NORTH
        } else if cell.row < goal.0 {
            SOUTH
        } else if cell.col < goal.1 {
            EAST
        } else {
            WEST
        })
    }

    /// Optimal action values by value iteration.
    pub fn optimal_q(&self, gamma: f64) -> QTable {
        let n_actions = TEXTGRID_ACTIONS.len();
        let states: Vec<StateId> = self.states().collect();
        let mut q = QTable::new(n_actions, gamma, 1.0);
        loop {
            let mut delta: f64 = 0.0;
            for &s in &states {
                for a in 0..n_actions {
                    let (next, r, done) = self.transition(s, a).expect("valid state");
                    let target = if done { r } else { r + gamma * q.max_value(next) };
                    delta = delta.max((target - q.get(s, a)).abs());
                    q.set(s, a, target);
                }
            }
            if delta < 1e-13 {
                return q;
            }
        }
    }
}

impl Task for TextGridTask {
    fn name(&self) -> &'static str {
        "textgrid"
    }

    fn action_names(&self) -> &[&'static str] {
        &TEXTGRID_ACTIONS
    }

    /// Reduction in Manhattan distance to the current subgoal for moves.
    /// Interaction actions score 0: the base oracle only reasons about
    /// navigation, and learns the pickup/open affordances from demonstrations.
    fn progress_scores(&self, state: StateId) -> Result<Vec<f64>> {
        let cell = self.decode(state)?;
        let goal = self.subgoal(cell.has_key);
        let here = Self::distance((cell.row, cell.col), goal) as f64;
        Ok((0..TEXTGRID_ACTIONS.len())
            .map(|a| match a {
                PICKUP | OPEN => 0.0,
                mv => {
                    let n = self.moved(cell, mv);
                    here - Self::distance((n.row, n.col), goal) as f64
                }
            })
            .collect())
    }

    fn describe(&self, state: StateId) -> Result<String> {
        let c = self.decode(state)?;
        let (kr, kc) = self.cfg.key;
        let (dr, dc) = self.cfg.door;
        Ok(format!(
            "You are at ({},{}). Key at ({kr},{kc}). Door at ({dr},{dc}). Carrying: {}.",
            c.row,
            c.col,
            if c.has_key { "yes" } else { "no" }
        ))
    }

    /// `(has_key, subgoal_row - row, subgoal_col - col)`.
    fn features(&self, state: StateId) -> Result<Vec<f64>> {
        let c = self.decode(state)?;
        let goal = self.subgoal(c.has_key);
        Ok(vec![
            c.has_key as u8 as f64,
            goal.0 as f64 - c.row as f64,
            goal.1 as f64 - c.col as f64,
        ])
    }

    fn feature_bounds(&self) -> Vec<(f64, f64)> {
        let span = (self.cfg.size - 1) as f64;
        vec![(0.0, 1.0), (-span, span), (-span, span)]
    }
}

/// Episode runner over a [`TextGridTask`].
#[derive(Debug, Clone)]
pub struct TextGrid {
    task: Arc<TextGridTask>,
    state: StateId,
    steps: usize,
    success: bool,
}

impl TextGrid {
    pub fn new(cfg: TextGridConfig) -> Result<Self> {
        let task = Arc::new(TextGridTask::new(cfg)?);
        let state = task.encode(Cell {
            row: 0,
            col: 0,
            has_key: false,
        });
        Ok(Self {
            task,
            state,
            steps: 0,
            success: false,
        })
    }

    pub fn layout(&self) -> &Arc<TextGridTask> {
        &self.task
    }

    /// Starts an episode from an explicit state.
    pub fn reset_to(&mut self, state: StateId) -> Result<()> {
        self.task.decode(state)?;
        self.state = state;
        self.steps = 0;
        self.success = false;
        Ok(())
    }

    pub fn cell(&self) -> Cell {
        self.task.decode(self.state).expect("own state decodes")
    }

    pub fn step_named(&mut self, action: &str) -> Result<StepOutcome> {
        let a = self
            .task
            .action_index(action)
            .ok_or_else(|| Error::UnknownAction(action.into()))?;
        self.step(&HybridAction::discrete(a))
    }
}

impl Environment for TextGrid {
    fn task(&self) -> Arc<dyn Task> {
        self.task.clone()
    }

    /// Random start cell, not carrying the key.
    fn reset(&mut self, rng: &mut dyn RngCore) -> StateId {
        let n = self.task.cfg.size;
        let pos = rng.gen_range(0..n * n);
        self.state = self.task.encode(Cell {
            row: pos / n,
            col: pos % n,
            has_key: false,
        });
        self.steps = 0;
        self.success = false;
        self.state
    }

    fn step(&mut self, action: &HybridAction) -> Result<StepOutcome> {
        if action.symbolic >= TEXTGRID_ACTIONS.len() {
            return Err(Error::UnknownAction(action.symbolic.to_string()));
        }
        let (next, reward, done) = self.task.transition(self.state, action.symbolic)?;
        self.state = next;
        self.steps += 1;
        self.success = done;
        Ok(StepOutcome {
            next,
            reward,
            done,
            truncated: !done && self.steps >= self.task.cfg.max_steps,
        })
    }

    fn state(&self) -> StateId {
        self.state
    }

    fn max_steps(&self) -> usize {
        self.task.cfg.max_steps
    }

    fn succeeded(&self) -> bool {
        self.success
    }

    fn expert_action(&self) -> HybridAction {
        HybridAction::discrete(self.task.expert_action(self.state).expect("own state decodes"))
    }

    fn random_action(&self, rng: &mut dyn RngCore) -> HybridAction {
        HybridAction::discrete(rng.gen_range(0..TEXTGRID_ACTIONS.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_at(row: usize, col: usize, has_key: bool) -> TextGrid {
        let mut g = TextGrid::new(TextGridConfig::default()).unwrap();
        let s = g.layout().encode(Cell { row, col, has_key });
        g.reset_to(s).unwrap();
        g
    }

    #[test]
    fn open_with_key_at_door_succeeds() {
        let mut g = grid_at(4, 0, true);
        let out = g.step_named("open").unwrap();
        assert_eq!(out.reward, 1.0);
        assert!(out.done);
        assert!(g.succeeded());
    }

    #[test]
    fn wall_move_keeps_position() {
        let mut g = grid_at(0, 2, false);
        let before = g.state();
        let out = g.step_named("north").unwrap();
        assert_eq!(out.next, before);
        assert_eq!(out.reward, -0.01);
        assert!(!out.done);
    }

    #[test]
    fn pickup_off_key_cell_does_nothing() {
        let mut g = grid_at(2, 2, false);
        let out = g.step_named("pickup").unwrap();
        assert!(!g.cell().has_key);
        assert_eq!(out.reward, -0.01);
    }

    #[test]
    fn pickup_on_key_cell_sets_flag() {
        let mut g = grid_at(0, 4, false);
        g.step_named("pickup").unwrap();
        assert!(g.cell().has_key);
    }

    #[test]
    fn open_without_key_fails() {
        let mut g = grid_at(4, 0, false);
        let out = g.step_named("open").unwrap();
        assert!(!out.done);
        assert_eq!(out.reward, -0.01);
    }

    #[test]
    fn unknown_action_is_error() {
        let mut g = grid_at(1, 1, false);
        assert!(matches!(g.step_named("jump"), Err(Error::UnknownAction(_))));
        assert!(g.step(&HybridAction::discrete(9)).is_err());
    }

    #[test]
    fn truncates_at_max_steps() {
        let mut g = grid_at(2, 2, false);
        let mut last = None;
        for _ in 0..60 {
            last = Some(g.step_named("pickup").unwrap());
        }
        assert!(last.unwrap().truncated);
    }

    #[test]
    fn description_template() {
        let g = grid_at(1, 2, true);
        assert_eq!(
            g.layout().describe(g.state()).unwrap(),
            "You are at (1,2). Key at (0,4). Door at (4,0). Carrying: yes."
        );
    }

    #[test]
    fn encode_decode_roundtrip() {
        let t = TextGridTask::new(TextGridConfig::default()).unwrap();
        for s in t.states() {
            assert_eq!(t.encode(t.decode(s).unwrap()), s);
        }
        assert!(t.decode(StateId(50)).is_err());
    }

    #[test]
    fn progress_scores_point_at_subgoal() {
        let t = TextGridTask::new(TextGridConfig::default()).unwrap();
        let s = t.encode(Cell {
            row: 2,
            col: 2,
            has_key: false,
        });
        // key at (0,4): north and east each close one unit
        assert_eq!(t.progress_scores(s).unwrap(), vec![1.0, -1.0, 1.0, -1.0, 0.0, 0.0]);
    }
}
