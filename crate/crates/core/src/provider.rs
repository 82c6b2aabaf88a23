//! Sources of action priors: a deterministic mock oracle with a virtual
//! latency clock, a uniform stand-in, and an HTTP client for an external
//! model. Also hosts few-shot adaptation of the mock oracle's logits.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::distribution::PriorDistribution;
use crate::env::{StateId, Task};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProviderStats {
    pub query_count: u64,
    /// Milliseconds; virtual for the mock, measured for the remote client.
    pub simulated_latency_total: f64,
}

/// Per-step cost of serving a prior from the cache or the provider.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub hit_cost_ms: f64,
    pub miss_cost_ms: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            hit_cost_ms: 18.7,
            miss_cost_ms: 349.0,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.hit_cost_ms > 0.0 && self.hit_cost_ms.is_finite()) {
            errs.push(format!("provider.latency.hit_ms must be positive, got {}", self.hit_cost_ms));
        }
        if !(self.miss_cost_ms > 0.0 && self.miss_cost_ms.is_finite()) {
            errs.push(format!("provider.latency.miss_ms must be positive, got {}", self.miss_cost_ms));
        }
        errs
    }

    pub fn cost(&self, hit: bool) -> f64 {
        if hit {
            self.hit_cost_ms
        } else {
            self.miss_cost_ms
        }
    }

    /// `h · hit + (1 − h) · miss`.
    pub fn weighted_mean(&self, hit_rate: f64) -> f64 {
        hit_rate * self.hit_cost_ms + (1.0 - hit_rate) * self.miss_cost_ms
    }
}

pub trait PriorProvider {
    /// Returns the prior for `state`. Every call counts as one query.
    fn query(&mut self, state: StateId) -> Result<PriorDistribution>;

    fn stats(&self) -> ProviderStats;

    /// Providers with per-state adjustable logits expose them here.
    fn adaptable(&mut self) -> Option<&mut MockProvider> {
        None
    }
}

/// Goal-progress softmax oracle: `softmax(sharpness · progress(s) + offset(s))`.
///
/// `offset` is zero until few-shot adaptation writes per-state corrections.
#[derive(Clone)]
pub struct MockProvider {
    task: Arc<dyn Task>,
    sharpness: f64,
    offsets: BTreeMap<StateId, Vec<f64>>,
    latency: LatencyModel,
    stats: ProviderStats,
}

impl std::fmt::Debug for MockProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockProvider")
            .field("task", &self.task.name())
            .field("sharpness", &self.sharpness)
            .field("adapted_states", &self.offsets.len())
            .field("stats", &self.stats)
            .finish()
    }
}

impl MockProvider {
    pub fn new(task: Arc<dyn Task>, sharpness: f64, latency: LatencyModel) -> Result<Self> {
        if !(sharpness > 0.0 && sharpness.is_finite()) {
            return Err(Error::OutOfRange(format!("sharpness {sharpness}")));
        }
        Ok(Self {
            task,
            sharpness,
            offsets: BTreeMap::new(),
            latency,
            stats: ProviderStats::default(),
        })
    }

    pub fn task(&self) -> &Arc<dyn Task> {
        &self.task
    }

    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    /// Unadapted logits `sharpness · progress(s)`.
    pub fn base_logits(&self, state: StateId) -> Result<Vec<f64>> {
        Ok(self
            .task
            .progress_scores(state)?
            .into_iter()
            .map(|p| self.sharpness * p)
            .collect())
    }

    pub fn logits(&self, state: StateId) -> Result<Vec<f64>> {
        let mut z = self.base_logits(state)?;
        if let Some(off) = self.offsets.get(&state) {
            z.iter_mut().zip(off).for_each(|(z, o)| *z += o);
        }
        Ok(z)
    }

    /// Replaces the logits of `state` so that they equal `logits`.
    pub fn set_logits(&mut self, state: StateId, logits: &[f64]) -> Result<()> {
        let base = self.base_logits(state)?;
        if base.len() != logits.len() {
            return Err(Error::DimensionMismatch {
                expected: base.len(),
                got: logits.len(),
            });
        }
        self.offsets
            .insert(state, logits.iter().zip(&base).map(|(z, b)| z - b).collect());
        Ok(())
    }

    pub fn adapted_states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.offsets.keys().copied()
    }

    /// The prior a query would return, without counting or charging.
    pub fn peek(&self, state: StateId) -> Result<PriorDistribution> {
        PriorDistribution::softmax(&self.logits(state)?)
    }
}

impl PriorProvider for MockProvider {
    fn query(&mut self, state: StateId) -> Result<PriorDistribution> {
        self.stats.query_count += 1;
        self.stats.simulated_latency_total += self.latency.miss_cost_ms;
        self.peek(state)
    }

    fn stats(&self) -> ProviderStats {
        self.stats
    }

    fn adaptable(&mut self) -> Option<&mut MockProvider> {
        Some(self)
    }
}

/// Uniform priors at no cost; used by the prior-free ablation.
#[derive(Debug, Clone)]
pub struct UniformProvider {
    n_actions: usize,
}

impl UniformProvider {
    pub fn new(n_actions: usize) -> Self {
        Self { n_actions }
    }
}

impl PriorProvider for UniformProvider {
    fn query(&mut self, _state: StateId) -> Result<PriorDistribution> {
        Ok(PriorDistribution::uniform(self.n_actions))
    }

    fn stats(&self) -> ProviderStats {
        ProviderStats::default()
    }
}

// ---------------------------------------------------------------------------
// Few-shot adaptation

/// Expert demonstrations `(state, action)` and the entropy weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSet {
    demos: Vec<(StateId, usize)>,
    pub lambda_ent: f64,
}

impl AdaptationSet {
    pub const DEFAULT_SHOTS: usize = 5;

    pub fn new(demos: Vec<(StateId, usize)>, lambda_ent: f64) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::InvalidAdaptation("no demonstrations".into()));
        }
        let distinct: BTreeSet<StateId> = demos.iter().map(|(s, _)| *s).collect();
        if distinct.len() != demos.len() {
            return Err(Error::InvalidAdaptation("duplicate demo states".into()));
        }
        if !(lambda_ent >= 0.0 && lambda_ent.is_finite()) {
            return Err(Error::InvalidAdaptation(format!("lambda_ent {lambda_ent}")));
        }
        Ok(Self { demos, lambda_ent })
    }

    pub fn demos(&self) -> &[(StateId, usize)] {
        &self.demos
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// `‖π − onehot(target)‖² − λ_ent · H(π)` for `π = softmax(z)`.
pub fn demo_loss(z: &[f64], target: usize, lambda_ent: f64) -> f64 {
    let lp = log_softmax(z);
    let mut sq = 0.0;
    let mut entropy = 0.0;
    for (k, l) in lp.iter().enumerate() {
        let p = l.exp();
        let y = if k == target { 1.0 } else { 0.0 };
        sq += (p - y).powi(2);
        entropy -= p * l;
    }
    sq - lambda_ent * entropy
}

/// Gradient of [`demo_loss`] with respect to the logits:
/// `∂L/∂z_k = π_k (g_k − Σ_i π_i g_i)` with `g = 2(π − y) + λ_ent (log π + 1)`.
pub fn demo_loss_grad(z: &[f64], target: usize, lambda_ent: f64) -> Vec<f64> {
    let lp = log_softmax(z);
    let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let g: Vec<f64> = lp
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let y = if k == target { 1.0 } else { 0.0 };
            2.0 * (p[k] - y) + lambda_ent * (l + 1.0)
        })
        .collect();
    let mean_g: f64 = p.iter().zip(&g).map(|(p, g)| p * g).sum();
    p.iter().zip(&g).map(|(p, g)| p * (g - mean_g)).collect()
}

/// Mean `−log π(a*|s)` over the demos.
pub fn demo_cross_entropy(provider: &MockProvider, set: &AdaptationSet) -> Result<f64> {
    let mut total = 0.0;
    for (s, a) in set.demos() {
        total -= log_softmax(&provider.logits(*s)?)[*a];
    }
    Ok(total / set.demos().len() as f64)
}

/// Sum of [`demo_loss`] over the demos.
pub fn adaptation_loss(provider: &MockProvider, set: &AdaptationSet) -> Result<f64> {
    let mut total = 0.0;
    for (s, a) in set.demos() {
        total += demo_loss(&provider.logits(*s)?, *a, set.lambda_ent);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    /// Loss before each step, plus the final loss.
    pub loss_curve: Vec<f64>,
    /// Mean cross-entropy against expert actions, same cadence.
    pub cross_entropy_curve: Vec<f64>,
}

impl AdaptationReport {
    pub fn initial_cross_entropy(&self) -> f64 {
        self.cross_entropy_curve[0]
    }

    pub fn final_cross_entropy(&self) -> f64 {
        *self.cross_entropy_curve.last().expect("non-empty curve")
    }

    /// Relative reduction of the mean cross-entropy.
    pub fn cross_entropy_reduction(&self) -> f64 {
        1.0 - self.final_cross_entropy() / self.initial_cross_entropy()
    }
}

/// Gradient descent on the demo-state logits of an adaptable provider.
pub fn adapt_prior(
    provider: &mut dyn PriorProvider,
    set: &AdaptationSet,
    steps: usize,
    lr: f64,
) -> Result<AdaptationReport> {
    let mock = provider.adaptable().ok_or(Error::NotAdaptable)?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidAdaptation(format!("learning rate {lr}")));
    }
    let n = mock.task().n_actions();
    if let Some((_, a)) = set.demos().iter().find(|(_, a)| *a >= n) {
        return Err(Error::UnknownAction(a.to_string()));
    }
    let mut logits = Vec::with_capacity(set.demos().len());
    for (s, _) in set.demos() {
        logits.push(mock.logits(*s)?);
    }
    let mut report = AdaptationReport {
        loss_curve: Vec::with_capacity(steps + 1),
        cross_entropy_curve: Vec::with_capacity(steps + 1),
    };
    let record = |logits: &[Vec<f64>], report: &mut AdaptationReport| {
        let mut loss = 0.0;
        let mut ce = 0.0;
        for (z, (_, a)) in logits.iter().zip(set.demos()) {
            loss += demo_loss(z, *a, set.lambda_ent);
            ce -= log_softmax(z)[*a];
        }
        report.loss_curve.push(loss);
        report
            .cross_entropy_curve
            .push(ce / set.demos().len() as f64);
    };
    for _ in 0..steps {
        record(&logits, &mut report);
        for (z, (_, a)) in logits.iter_mut().zip(set.demos()) {
            let g = demo_loss_grad(z, *a, set.lambda_ent);
            z.iter_mut().zip(&g).for_each(|(z, g)| *z -= lr * g);
        }
    }
    record(&logits, &mut report);
    for (z, (s, _)) in logits.iter().zip(set.demos()) {
        mock.set_logits(*s, z)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Remote client

/// What to do when the remote endpoint fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    Abort,
    Uniform,
}

impl std::str::FromStr for Fallback {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "abort" => Ok(Self::Abort),
            "uniform" => Ok(Self::Uniform),
            other => Err(format!("unknown fallback `{other}`")),
        }
    }
}

#[derive(Serialize)]
struct PriorRequest<'a> {
    state: &'a str,
    actions: &'a [&'a str],
}

#[derive(Deserialize)]
struct PriorResponse {
    probs: BTreeMap<String, f64>,
}

/// Parses `{"probs": {name: weight}}`, zero-filling missing actions and
/// renormalizing.
pub fn parse_prior_response(body: &str, actions: &[&str]) -> Result<PriorDistribution> {
    let resp: PriorResponse = serde_json::from_str(body)
        .map_err(|e| Error::Provider(format!("malformed response: {e}")))?;
    let weights: Vec<f64> = actions
        .iter()
        .map(|a| resp.probs.get(*a).copied().unwrap_or(0.0))
        .collect();
    PriorDistribution::from_weights(weights)
        .map_err(|e| Error::Provider(format!("unusable probabilities: {e}")))
}

/// Posts state descriptions to `{url}/prior`.
pub struct RemoteProvider {
    task: Arc<dyn Task>,
    endpoint: String,
    client: reqwest::blocking::Client,
    fallback: Fallback,
    stats: ProviderStats,
}

impl RemoteProvider {
    pub fn new(
        task: Arc<dyn Task>,
        base_url: &str,
        timeout: Duration,
        fallback: Fallback,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Provider(e.to_string()))?;
        Ok(Self {
            task,
            endpoint: format!("{}/prior", base_url.trim_end_matches('/')),
            client,
            fallback,
            stats: ProviderStats::default(),
        })
    }

    fn fetch(&self, state: StateId) -> Result<PriorDistribution> {
        let description = self.task.describe(state)?;
        let actions = self.task.action_names();
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&PriorRequest {
                state: &description,
                actions,
            })
            .send()
            .map_err(|e| Error::Provider(format!("request to {} failed: {e}", self.endpoint)))?;
        let status = resp.status();
        let body = resp
            .text()
            .map_err(|e| Error::Provider(format!("reading response: {e}")))?;
        if !status.is_success() {
            return Err(Error::Provider(format!("{} returned {status}", self.endpoint)));
        }
        parse_prior_response(&body, actions)
    }
}

impl PriorProvider for RemoteProvider {
    fn query(&mut self, state: StateId) -> Result<PriorDistribution> {
        let start = Instant::now();
        let out = self.fetch(state);
        self.stats.query_count += 1;
        self.stats.simulated_latency_total += start.elapsed().as_secs_f64() * 1e3;
        match (out, self.fallback) {
            (Ok(p), _) => Ok(p),
            (Err(e), Fallback::Uniform) => {
                log::warn!("remote prior for {state} failed, using uniform: {e}");
                Ok(PriorDistribution::uniform(self.task.n_actions()))
            }
            (Err(e), Fallback::Abort) => Err(e),
        }
    }

    fn stats(&self) -> ProviderStats {
        self.stats
    }
}
