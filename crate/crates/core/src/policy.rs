//! Posterior action selection: a cached or freshly queried prior is
//! reweighted by `exp(Q/τ)`, where the temperature falls as the cache hit
//! rate rises.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{Lookup, SemanticCache};
use crate::distribution::PriorDistribution;
use crate::embedding::Embedding;
use crate::env::StateId;
use crate::error::{Error, Result};
use crate::provider::PriorProvider;

/// `τ(h) = max(floor, base · exp(−decay · h))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub base: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            base: 0.8,
            decay: 2.0,
            floor: 0.1,
        }
    }
}

impl TemperatureSchedule {
    /// A schedule that ignores the hit rate.
    pub fn fixed(tau: f64) -> Self {
        Self {
            base: tau,
            decay: 0.0,
            floor: tau,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.base > 0.0 && self.base.is_finite()) {
            errs.push(format!("schedule.base must be positive, got {}", self.base));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            errs.push(format!("schedule.decay must be >= 0, got {}", self.decay));
        }
        if !(self.floor > 0.0 && self.floor <= self.base) {
            errs.push(format!(
                "schedule.floor must lie in (0, base], got {}",
                self.floor
            ));
        }
        errs
    }
}

pub fn temperature(h: f64, sched: &TemperatureSchedule) -> Result<f64> {
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::OutOfRange(format!("hit rate {h} not in [0, 1]")));
    }
    Ok(sched.floor.max(sched.base * (-sched.decay * h).exp()))
}

/// Hit rate over the most recent `capacity` lookups.
#[derive(Debug, Clone)]
pub struct HitWindow {
    flags: VecDeque<bool>,
    capacity: usize,
    hits: usize,
}

impl HitWindow {
    pub const DEFAULT_LEN: usize = 500;

    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            flags: VecDeque::with_capacity(capacity),
            capacity,
            hits: 0,
        }
    }

    pub fn push(&mut self, hit: bool) {
        if self.flags.len() == self.capacity && self.flags.pop_front() == Some(true) {
            self.hits -= 1;
        }
        self.flags.push_back(hit);
        self.hits += usize::from(hit);
    }

    /// 0 when empty.
    pub fn rate(&self) -> f64 {
        if self.flags.is_empty() {
            0.0
        } else {
            self.hits as f64 / self.flags.len() as f64
        }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }
}

impl Default for HitWindow {
    fn default() -> Self {
        Self::new(Self::DEFAULT_LEN)
    }
}

/// `w_a ∝ prior(a) · exp(q_a / τ)`, max-subtracted over the prior support.
pub fn posterior_weights(prior: &PriorDistribution, q: &[f64], tau: f64) -> Result<PriorDistribution> {
    check_shape(prior, q, tau)?;
    let mut m = f64::NEG_INFINITY;
    for a in prior.support() {
        if !q[a].is_finite() {
            return Err(Error::NonFinite(a));
        }
        m = m.max(q[a]);
    }
    let w: Vec<f64> = prior
        .probs()
        .iter()
        .zip(q)
        .map(|(p, qa)| if *p > 0.0 { p * ((qa - m) / tau).exp() } else { 0.0 })
        .collect();
    PriorDistribution::from_weights(w).map_err(|_| Error::ZeroWeights)
}

/// Maximizer of `E_π[q] − α · KL(π ‖ prior)`, evaluated in log space.
pub fn kl_regularized_policy(
    prior: &PriorDistribution,
    q: &[f64],
    alpha: f64,
) -> Result<PriorDistribution> {
    check_shape(prior, q, alpha)?;
    let logits: Vec<f64> = prior
        .probs()
        .iter()
        .zip(q)
        .map(|(p, qa)| {
            if *p > 0.0 {
                p.ln() + qa / alpha
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    if let Some(a) = prior.support().find(|a| !logits[*a].is_finite()) {
        return Err(Error::NonFinite(a));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    PriorDistribution::from_weights(w).map_err(|_| Error::ZeroWeights)
}

/// `E_π[q] − α · KL(π ‖ prior)`; `−∞` if π leaves the prior support.
pub fn kl_objective(pi: &PriorDistribution, prior: &PriorDistribution, q: &[f64], alpha: f64) -> f64 {
    let mut value = 0.0;
    for ((p, r), qa) in pi.probs().iter().zip(prior.probs()).zip(q) {
        if *p == 0.0 {
            continue;
        }
        if *r == 0.0 {
            return f64::NEG_INFINITY;
        }
        value += p * qa - alpha * p * (p / r).ln();
    }
    value
}

fn check_shape(prior: &PriorDistribution, q: &[f64], tau: f64) -> Result<()> {
    if prior.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: prior.len(),
            got: q.len(),
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::OutOfRange(format!("temperature {tau}")));
    }
    Ok(())
}

/// Draws `min(k, |support|)` distinct actions, each draw proportional to the
/// prior mass among the remaining actions.
pub fn sample_candidates<R: Rng + ?Sized>(
    prior: &PriorDistribution,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut remaining: Vec<(usize, f64)> = prior.support().map(|a| (a, prior.prob(a))).collect();
    let n = k.min(remaining.len());
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let total: f64 = remaining.iter().map(|(_, p)| p).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (i, (_, p)) in remaining.iter().enumerate() {
            if u < *p {
                pick = i;
                break;
            }
            u -= p;
        }
        out.push(remaining.swap_remove(pick).0);
    }
    out.sort_unstable();
    out
}

/// Where the prior for a step came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFetch {
    pub prior: PriorDistribution,
    pub hit: bool,
    pub similarity: Option<f64>,
}

/// Cache lookup with provider fallback; without a cache every call queries.
pub fn fetch_prior(
    state: StateId,
    key: &Embedding,
    cache: Option<&mut SemanticCache>,
    provider: &mut dyn PriorProvider,
    now: u64,
) -> Result<PriorFetch> {
    let Some(cache) = cache else {
        return Ok(PriorFetch {
            prior: provider.query(state)?,
            hit: false,
            similarity: None,
        });
    };
    match cache.lookup(key, now) {
        Lookup::Hit {
            prior, similarity, ..
        } => Ok(PriorFetch {
            prior,
            hit: true,
            similarity: Some(similarity),
        }),
        Lookup::Miss { best_similarity } => {
            let prior = provider.query(state)?;
            cache.insert(key.clone(), prior.clone(), state, now)?;
            Ok(PriorFetch {
                prior,
                hit: false,
                similarity: best_similarity,
            })
        }
    }
}

/// Per-step record of the two-stage selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub state: StateId,
    pub hit: bool,
    pub similarity: Option<f64>,
    pub tau: f64,
    pub candidates: Vec<usize>,
    pub weights: Vec<f64>,
    pub action: usize,
}

/// Stage two: candidate sampling and posterior draw over the candidates.
pub fn sample_posterior<R: Rng + ?Sized>(
    prior: &PriorDistribution,
    q: &[f64],
    tau: f64,
    k: usize,
    rng: &mut R,
) -> Result<(usize, Vec<usize>, Vec<f64>)> {
    if k == 0 {
        return Err(Error::OutOfRange("candidate count k must be >= 1".into()));
    }
    let candidates = sample_candidates(prior, k, rng);
    let sub_prior = PriorDistribution::from_weights(candidates.iter().map(|a| prior.prob(*a)).collect())?;
    let sub_q: Vec<f64> = candidates.iter().map(|a| q[*a]).collect();
    let post = posterior_weights(&sub_prior, &sub_q, tau)?;
    let action = candidates[post.sample(rng)];
    Ok((action, candidates, post.probs().to_vec()))
}

/// Full selection for one state: fetch the prior, then sample.
#[allow(clippy::too_many_arguments)]
pub fn select_action<R: Rng + ?Sized>(
    state: StateId,
    key: &Embedding,
    cache: Option<&mut SemanticCache>,
    provider: &mut dyn PriorProvider,
    q: &[f64],
    tau: f64,
    k: usize,
    rng: &mut R,
    now: u64,
) -> Result<StepTrace> {
    let fetch = fetch_prior(state, key, cache, provider, now)?;
    let (action, candidates, weights) = sample_posterior(&fetch.prior, q, tau, k, rng)?;
    Ok(StepTrace {
        state,
        hit: fetch.hit,
        similarity: fetch.similarity,
        tau,
        candidates,
        weights,
        action,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn temperature_examples() {
        let s = TemperatureSchedule::default();
        assert_eq!(temperature(0.0, &s).unwrap(), 0.8);
        assert!((temperature(1.0, &s).unwrap() - 0.10827).abs() < 1e-5);
        assert!((temperature(0.5, &s).unwrap() - 0.29430).abs() < 1e-5);
        assert!(temperature(1.1, &s).is_err());
        assert_eq!(temperature(0.7, &TemperatureSchedule::fixed(0.8)).unwrap(), 0.8);
    }

    #[test]
    fn posterior_two_actions() {
        let p = posterior_weights(&PriorDistribution::uniform(2), &[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.prob(0) - e / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_prior_annihilates() {
        let p = posterior_weights(&PriorDistribution::one_hot(2, 0), &[-5.0, 9.0], 0.1).unwrap();
        assert_eq!(p.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn equal_q_returns_prior() {
        let prior = PriorDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        let p = posterior_weights(&prior, &[4.0; 3], 0.3).unwrap();
        assert!(p.total_variation(&prior) < 1e-15);
    }

    #[test]
    fn kl_policy_at_huge_alpha_is_prior() {
        let prior = PriorDistribution::new(vec![0.1, 0.6, 0.3]).unwrap();
        let p = kl_regularized_policy(&prior, &[1.0, -1.0, 0.5], 1e6).unwrap();
        assert!(p.total_variation(&prior) < 1e-5);
    }

    #[test]
    fn hit_window_slides() {
        let mut w = HitWindow::new(2);
        assert_eq!(w.rate(), 0.0);
        w.push(true);
        w.push(false);
        assert_eq!(w.rate(), 0.5);
        w.push(false);
        assert_eq!(w.rate(), 0.0);
    }

    #[test]
    fn candidates_are_distinct_and_in_support() {
        let prior = PriorDistribution::new(vec![0.5, 0.0, 0.25, 0.25]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = sample_candidates(&prior, 2, &mut rng);
            assert_eq!(c.len(), 2);
            assert_ne!(c[0], c[1]);
            assert!(!c.contains(&1));
        }
        assert_eq!(sample_candidates(&prior, 10, &mut rng), vec![0, 2, 3]);
    }
}
