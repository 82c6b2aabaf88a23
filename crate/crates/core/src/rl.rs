//! Tabular Q-learning, a bucketed conditional Gaussian head for the
//! continuous action component, and a FIFO replay buffer.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::StateId;
use crate::error::{Error, Result};
use crate::meta::BatchMetrics;

/// `(a_sym, u)`; `continuous` is empty in discrete environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridAction {
    pub symbolic: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub continuous: Vec<f64>,
}

impl HybridAction {
    pub fn discrete(symbolic: usize) -> Self {
        Self {
            symbolic,
            continuous: Vec::new(),
        }
    }

    pub fn hybrid(symbolic: usize, continuous: Vec<f64>) -> Self {
        Self {
            symbolic,
            continuous,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateId,
    pub action: HybridAction,
    pub reward: f64,
    pub next_state: StateId,
    pub done: bool,
}

/// Sparse action-value table; unseen entries read as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: BTreeMap<StateId, Vec<f64>>,
    n_actions: usize,
    pub gamma: f64,
    pub lr: f64,
}

impl QTable {
    pub fn new(n_actions: usize, gamma: f64, lr: f64) -> Self {
        assert!(n_actions > 0);
        assert!((0.0..1.0).contains(&gamma), "gamma must lie in [0, 1)");
        Self {
            values: BTreeMap::new(),
            n_actions,
            gamma,
            lr,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: StateId, a: usize) -> f64 {
        self.values.get(&s).map_or(0.0, |row| row[a])
    }

    pub fn set(&mut self, s: StateId, a: usize, v: f64) {
        debug_assert!(v.is_finite());
        let n = self.n_actions;
        self.values.entry(s).or_insert_with(|| vec![0.0; n])[a] = v;
    }

    pub fn row(&self, s: StateId) -> Vec<f64> {
        self.values
            .get(&s)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.n_actions])
    }

    pub fn row_mut(&mut self, s: StateId) -> &mut [f64] {
        let n = self.n_actions;
        self.values.entry(s).or_insert_with(|| vec![0.0; n])
    }

    pub fn max_value(&self, s: StateId) -> f64 {
        self.values
            .get(&s)
            .map_or(0.0, |row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Lowest-index maximizer.
    pub fn greedy(&self, s: StateId) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for (a, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.values.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (StateId, &[f64])> {
        self.values.iter().map(|(s, r)| (*s, r.as_slice()))
    }

    /// TD error of `t` under the current table, for action index `a`.
    pub fn td_error(&self, t: &Transition, a: usize) -> f64 {
        let bootstrap = if t.done {
            0.0
        } else {
            self.gamma * self.max_value(t.next_state)
        };
        t.reward + bootstrap - self.get(t.state, a)
    }

    /// One Q-learning step on `t`; returns `|td|`.
    pub fn update(&mut self, t: &Transition) -> f64 {
        self.update_index(t, t.action.symbolic)
    }

    /// Q-learning step where the table column is `a` rather than the
    /// symbolic action (hybrid tasks fold a `u` bin into the column).
    pub fn update_index(&mut self, t: &Transition, a: usize) -> f64 {
        let td = self.td_error(t, a);
        let v = self.get(t.state, a) + self.lr * td;
        self.set(t.state, a, v);
        td.abs()
    }

    /// `state,action,value` rows in state order.
    pub fn write_csv<W: Write>(&self, w: W, action_names: &[&str]) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["state", "action", "value"])?;
        for (s, row) in &self.values {
            for (a, v) in row.iter().enumerate() {
                let name = action_names.get(a).copied().unwrap_or("?");
                out.write_record([s.0.to_string(), name.to_string(), format!("{v}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-(state, symbolic action) Gaussian over the continuous component,
/// trained by advantage-weighted mean regression against a state baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    means: BTreeMap<(StateId, usize), Vec<f64>>,
    values: BTreeMap<StateId, f64>,
    dim: usize,
    init_mean: f64,
    pub sigma: f64,
    pub lr_mean: f64,
    pub lr_value: f64,
    pub bounds: (f64, f64),
}

impl GaussianHead {
    pub fn new(dim: usize, init_mean: f64, sigma: f64, lr_mean: f64, lr_value: f64) -> Self {
        assert!(sigma > 0.0);
        Self {
            means: BTreeMap::new(),
            values: BTreeMap::new(),
            dim,
            init_mean,
            sigma,
            lr_mean,
            lr_value,
            bounds: (0.0, 1.0),
        }
    }

    pub fn mean(&self, s: StateId, a: usize) -> Vec<f64> {
        self.means
            .get(&(s, a))
            .cloned()
            .unwrap_or_else(|| vec![self.init_mean; self.dim])
    }

    pub fn value(&self, s: StateId) -> f64 {
        self.values.get(&s).copied().unwrap_or(0.0)
    }

    /// Linear annealing between `start` and `end` over `progress ∈ [0, 1]`.
    pub fn anneal(&mut self, start: f64, end: f64, progress: f64) {
        let p = progress.clamp(0.0, 1.0);
        self.sigma = start + (end - start) * p;
    }

    /// Draws `u ~ N(mean, σ²)` clipped to the action bounds.
    pub fn sample<R: Rng + ?Sized>(&self, s: StateId, a: usize, rng: &mut R) -> Vec<f64> {
        let normal = Normal::new(0.0, self.sigma).expect("sigma > 0");
        self.mean(s, a)
            .into_iter()
            .map(|m| (m + normal.sample(rng)).clamp(self.bounds.0, self.bounds.1))
            .collect()
    }

    pub fn advantage(&self, t: &Transition, gamma: f64) -> f64 {
        let next = if t.done {
            0.0
        } else {
            gamma * self.value(t.next_state)
        };
        t.reward + next - self.value(t.state)
    }

    pub fn update(&mut self, t: &Transition, gamma: f64) -> Result<()> {
        if t.action.continuous.is_empty() {
            return Err(Error::NoContinuousAction);
        }
        let adv = self.advantage(t, gamma);
        let key = (t.state, t.action.symbolic);
        let mut mean = self.mean(t.state, t.action.symbolic);
        for (m, u) in mean.iter_mut().zip(&t.action.continuous) {
            *m += self.lr_mean * adv * (u - *m);
        }
        self.means.insert(key, mean);
        let v = self.value(t.state) + self.lr_value * adv;
        self.values.insert(t.state, v);
        Ok(())
    }
}

/// Bounded FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    buf: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            buf: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.buf.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        if self.buf.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.buf[rng.gen_range(0..self.buf.len())])
            .collect()
    }
}

/// What one environment step contributes to the batch metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub td_error: f64,
    pub hit: bool,
    pub q_value: f64,
}

/// Mean |TD|, hit fraction and population std of Q over the batch.
pub fn batch_metrics(recent: &[StepRecord]) -> Result<BatchMetrics> {
    if recent.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = recent.len() as f64;
    let mean_td = recent.iter().map(|r| r.td_error.abs()).sum::<f64>() / n;
    let hit_rate = recent.iter().filter(|r| r.hit).count() as f64 / n;
    let mean_q = recent.iter().map(|r| r.q_value).sum::<f64>() / n;
    let var = recent
        .iter()
        .map(|r| (r.q_value - mean_q).powi(2))
        .sum::<f64>()
        / n;
    BatchMetrics::new(mean_td, hit_rate, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(s: u64, a: usize, r: f64, s2: u64, done: bool) -> Transition {
        Transition {
            state: StateId(s),
            action: HybridAction::discrete(a),
            reward: r,
            next_state: StateId(s2),
            done,
        }
    }

    #[test]
    fn terminal_update_with_unit_lr() {
        let mut q = QTable::new(2, 0.9, 1.0);
        let td = q.update(&tr(0, 1, 1.0, 1, true));
        assert_eq!(td, 1.0);
        assert_eq!(q.get(StateId(0), 1), 1.0);
    }

    #[test]
    fn zero_reward_terminal_is_noop() {
        let mut q = QTable::new(2, 0.9, 0.5);
        let td = q.update(&tr(0, 0, 0.0, 1, true));
        assert_eq!(td, 0.0);
        assert_eq!(q.get(StateId(0), 0), 0.0);
    }

    #[test]
    fn gaussian_head_zero_advantage_keeps_mean() {
        let mut head = GaussianHead::new(1, 0.5, 0.3, 0.5, 0.5);
        let t = Transition {
            state: StateId(0),
            action: HybridAction::hybrid(0, vec![0.9]),
            reward: 0.0,
            next_state: StateId(0),
            done: true,
        };
        assert_eq!(head.advantage(&t, 0.9), 0.0);
        head.update(&t, 0.9).unwrap();
        assert_eq!(head.mean(StateId(0), 0), vec![0.5]);
    }

    #[test]
    fn gaussian_head_residual_zero_keeps_mean() {
        let mut head = GaussianHead::new(1, 0.5, 0.3, 0.5, 0.5);
        let t = Transition {
            state: StateId(0),
            action: HybridAction::hybrid(0, vec![0.5]),
            reward: 3.0,
            next_state: StateId(1),
            done: false,
        };
        head.update(&t, 0.9).unwrap();
        assert_eq!(head.mean(StateId(0), 0), vec![0.5]);
    }

    #[test]
    fn gaussian_head_moves_toward_good_actions() {
        let mut head = GaussianHead::new(1, 0.5, 0.3, 0.5, 0.5);
        let t = Transition {
            state: StateId(0),
            action: HybridAction::hybrid(2, vec![0.8]),
            reward: 1.0,
            next_state: StateId(1),
            done: true,
        };
        head.update(&t, 0.9).unwrap();
        assert!(head.mean(StateId(0), 2)[0] > 0.5);
    }

    #[test]
    fn gaussian_head_requires_continuous_part() {
        let mut head = GaussianHead::new(1, 0.5, 0.3, 0.5, 0.5);
        assert!(matches!(
            head.update(&tr(0, 0, 1.0, 1, false), 0.9),
            Err(Error::NoContinuousAction)
        ));
    }

    #[test]
    fn replay_drops_oldest() {
        let mut rb = ReplayBuffer::new(3);
        for i in 0..5 {
            rb.push(tr(i, 0, 0.0, i, false));
        }
        let kept: Vec<u64> = rb.iter().map(|t| t.state.0).collect();
        assert_eq!(kept, vec![2, 3, 4]);
    }

    #[test]
    fn batch_metrics_examples() {
        let rec = |td: f64, hit: bool, q: f64| StepRecord {
            td_error: td,
            hit,
            q_value: q,
        };
        let m = batch_metrics(&[rec(1.0, true, 0.0), rec(3.0, false, 2.0)]).unwrap();
        assert_eq!(m.mean_td_error, 2.0);
        assert_eq!(m.hit_rate, 0.5);
        assert_eq!(m.policy_variability, 1.0);

        let same = batch_metrics(&[rec(0.0, true, 0.7), rec(0.0, true, 0.7)]).unwrap();
        assert_eq!(same.policy_variability, 0.0);

        assert!(matches!(batch_metrics(&[]), Err(Error::EmptyBatch)));
    }
}
