//! Normalized categorical distributions over symbolic actions.
//!
//! Actions are identified by their index into the environment's action
//! vocabulary, so a [`PriorDistribution`] is a dense probability vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed deviation of the probability mass from 1.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Floor applied before taking logarithms of probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

/// A categorical distribution over action indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PriorDistribution {
    probs: Vec<f64>,
}

impl PriorDistribution {
    /// Validates an already-normalized probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidPrior("no actions".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidPrior(format!(
                "probability {} at action {i}",
                probs[i]
            )));
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidPrior(format!("mass {mass} is not 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidPrior(format!(
                "weight {} at action {i}",
                weights[i]
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroWeights);
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution needs at least one action");
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, action: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[action] = 1.0;
        Self { probs }
    }

    /// Softmax of finite logits, computed with max-subtraction.
    pub fn softmax(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidPrior("no actions".into()));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidPrior("non-finite logit".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::from_weights(logits.iter().map(|z| (z - max).exp()).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, action: usize) -> f64 {
        self.probs.get(action).copied().unwrap_or(0.0)
    }

    /// Indices with strictly positive probability.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, _)| i)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Copy with every probability raised to at least `floor`, renormalized.
    pub fn floored(&self, floor: f64) -> Self {
        let raised: Vec<f64> = self.probs.iter().map(|p| p.max(floor)).collect();
        let total: f64 = raised.iter().sum();
        Self {
            probs: raised.into_iter().map(|p| p / total).collect(),
        }
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }

    /// Draws an action index by inverse-CDF sampling.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

impl TryFrom<Vec<f64>> for PriorDistribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<PriorDistribution> for Vec<f64> {
    fn from(p: PriorDistribution) -> Self {
        p.probs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_mass() {
        assert!(PriorDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(PriorDistribution::new(vec![]).is_err());
        assert!(PriorDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(PriorDistribution::from_weights(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_two_actions() {
        let p = PriorDistribution::softmax(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((p.prob(0) - e / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn floored_is_finite_and_normalized() {
        let p = PriorDistribution::new(vec![1.0, 0.0, 0.0]).unwrap().floored(PROB_FLOOR);
        assert!(p.probs().iter().all(|x| *x > 0.0));
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_never_leaves_support() {
        let p = PriorDistribution::new(vec![0.0, 0.3, 0.0, 0.7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = p.sample(&mut rng);
            assert!(a == 1 || a == 3);
        }
    }
}
