//! Error of posteriors built from cached priors, against the bound
//!
//! ```text
//! KL(p̃ ‖ p*) ≤ x / (1 − e^{−x}) · (1 + ρ),   x = κ′ + ε / τ
//! ```
//!
//! where `κ′` is the sup-norm log-prior error, `ε` the sup-norm Q error and
//! `ρ = μ(s) / E[μ]` the relative visitation density of the state.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distribution::{PriorDistribution, PROB_FLOOR};
use crate::env::StateId;
use crate::error::{Error, Result};
use crate::policy::posterior_weights;
use crate::provider::MockProvider;
use crate::rl::QTable;

/// `max_a |log cached(a) − log fresh(a)|` after flooring both at 1e-12.
pub fn prior_error(cached: &PriorDistribution, fresh: &PriorDistribution) -> f64 {
    let c = cached.floored(PROB_FLOOR);
    let f = fresh.floored(PROB_FLOOR);
    c.probs()
        .iter()
        .zip(f.probs())
        .map(|(a, b)| (a.ln() - b.ln()).abs())
        .fold(0.0, f64::max)
}

/// `max_a |q(a) − q*(a)|`.
pub fn q_error(q: &[f64], q_star: &[f64]) -> f64 {
    assert_eq!(q.len(), q_star.len(), "action sets differ");
    q.iter()
        .zip(q_star)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub kappa: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub rho: f64,
}

impl BoundInputs {
    pub fn x(&self) -> f64 {
        self.kappa + self.epsilon / self.tau
    }
}

pub fn theorem1_bound(b: &BoundInputs) -> f64 {
    let x = b.x();
    let factor = if x < 1e-12 { 1.0 } else { x / -(-x).exp_m1() };
    factor * (1.0 + b.rho)
}

/// `Σ p̃ log(p̃ / p*)` with both sides floored at 1e-12.
pub fn measured_kl(cached_posterior: &PriorDistribution, exact_posterior: &PriorDistribution) -> f64 {
    let p = cached_posterior.floored(PROB_FLOOR);
    let q = exact_posterior.floored(PROB_FLOOR);
    let kl: f64 = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| a * (a / b).ln())
        .sum();
    kl.max(0.0)
}

/// Adds `N(0, σ²)` to each log-probability and renormalizes.
pub fn perturb_prior<R: Rng + ?Sized>(
    prior: &PriorDistribution,
    sigma: f64,
    rng: &mut R,
) -> Result<PriorDistribution> {
    if sigma == 0.0 {
        return Ok(prior.clone());
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::OutOfRange(e.to_string()))?;
    let logits: Vec<f64> = prior
        .floored(PROB_FLOOR)
        .probs()
        .iter()
        .map(|p| p.ln() + noise.sample(rng))
        .collect();
    PriorDistribution::softmax(&logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub noise_level: f64,
    pub state: StateId,
    pub kappa: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub tau: f64,
    pub measured_kl: f64,
    pub bound: f64,
    pub violated: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub noise_level: f64,
    pub samples: usize,
    pub mean_kl: f64,
    pub mean_bound: f64,
    pub max_kl_to_bound: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
    pub levels: Vec<LevelSummary>,
}

impl BoundReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.violated == 1).count()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Snapshot of a trained agent against which the bound is checked.
pub struct BoundSetup<'a> {
    /// Source of fresh priors; queried through `peek`, so nothing is counted.
    pub provider: &'a MockProvider,
    pub q: &'a QTable,
    pub q_star: &'a QTable,
    /// Visit counts from the evaluation run; unvisited states are never sampled.
    pub visits: &'a BTreeMap<StateId, u64>,
    pub tau: f64,
}

/// For each noise level draws `samples` visited states uniformly, perturbs
/// their fresh prior and compares the resulting posterior KL with the bound.
pub fn bound_experiment(
    setup: &BoundSetup<'_>,
    noise_levels: &[f64],
    samples: usize,
    seed: u64,
) -> Result<BoundReport> {
    let visited: Vec<(StateId, u64)> = setup
        .visits
        .iter()
        .filter(|(_, c)| **c > 0)
        .map(|(s, c)| (*s, *c))
        .collect();
    if visited.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(setup.tau > 0.0) {
        return Err(Error::OutOfRange(format!("temperature {}", setup.tau)));
    }
    let mean_mu = visited.iter().map(|(_, c)| *c as f64).sum::<f64>() / visited.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(noise_levels.len() * samples);
    let mut levels = Vec::with_capacity(noise_levels.len());
    for &sigma in noise_levels {
        let start = rows.len();
        for _ in 0..samples {
            let (s, count) = visited[rng.gen_range(0..visited.len())];
            let fresh = setup.provider.peek(s)?;
            let cached = perturb_prior(&fresh, sigma, &mut rng)?;
            let q = setup.q.row(s);
            let q_star = setup.q_star.row(s);
            let inputs = BoundInputs {
                kappa: prior_error(&cached, &fresh),
                epsilon: q_error(&q, &q_star),
                tau: setup.tau,
                rho: count as f64 / mean_mu,
            };
            let kl = measured_kl(
                &posterior_weights(&cached, &q, setup.tau)?,
                &posterior_weights(&fresh, &q_star, setup.tau)?,
            );
            let bound = theorem1_bound(&inputs);
            rows.push(BoundRow {
                noise_level: sigma,
                state: s,
                kappa: inputs.kappa,
                epsilon: inputs.epsilon,
                rho: inputs.rho,
                tau: inputs.tau,
                measured_kl: kl,
                bound,
                violated: u8::from(kl > bound),
            });
        }
        let level = &rows[start..];
        let n = level.len().max(1) as f64;
        levels.push(LevelSummary {
            noise_level: sigma,
            samples: level.len(),
            mean_kl: level.iter().map(|r| r.measured_kl).sum::<f64>() / n,
            mean_bound: level.iter().map(|r| r.bound).sum::<f64>() / n,
            max_kl_to_bound: level
                .iter()
                .map(|r| r.measured_kl / r.bound)
                .fold(0.0, f64::max),
            violations: level.iter().filter(|r| r.violated == 1).count(),
        });
    }
    Ok(BoundReport { rows, levels })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayCheck {
    pub beta_hat: f64,
    pub windows: usize,
    pub pass: bool,
}

/// Median of successive ratios `E[κ′]_{t+1} / E[κ′]_t`; passes when below 1.
///
/// Pairs where both windows are 0 carry no information and are skipped; a
/// rise from 0 counts as an infinite ratio. If every pair is skipped the
/// series is identically 0 and `β̂ = 0`.
pub fn corollary_decay_check(history: &[f64]) -> Result<DecayCheck> {
    if history.len() < 3 {
        return Err(Error::TooFewWindows(history.len()));
    }
    if let Some(i) = history.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::NonFinite(i));
    }
    let mut ratios: Vec<f64> = history
        .windows(2)
        .filter_map(|w| match (w[0], w[1]) {
            (0.0, 0.0) => None,
            (0.0, _) => Some(f64::INFINITY),
            (a, b) => Some(b / a),
        })
        .collect();
    let beta_hat = if ratios.is_empty() {
        0.0
    } else {
        ratios.sort_by(f64::total_cmp);
        let n = ratios.len();
        if n % 2 == 1 {
            ratios[n / 2]
        } else {
            let (a, b) = (ratios[n / 2 - 1], ratios[n / 2]);
            if a.is_infinite() || b.is_infinite() {
                f64::INFINITY
            } else {
                0.5 * (a + b)
            }
        }
    };
    Ok(DecayCheck {
        beta_hat,
        windows: history.len(),
        pass: beta_hat < 1.0,
    })
}
