//! Online adaptation of cache parameters from batch performance metrics.
//!
//! Each training batch yields a mean TD error, a hit rate and the spread of
//! Q-values. Those drive heuristic surrogate gradients for capacity,
//! similarity threshold and refresh rate:
//!
//! ```text
//! g_K = +λ_K (1 − h) / K      grow when hits are scarce
//! g_δ = −λ_δ ε̄ / δ            loosen when TD error is high
//! g_r = +λ_r v                 refresh more when Q-values are volatile
//! ```
//!
//! followed by a projected ascent step `θ ← clip(θ + η g)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cache::CacheParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub mean_td_error: f64,
    pub hit_rate: f64,
    pub policy_variability: f64,
}

impl BatchMetrics {
    pub fn new(mean_td_error: f64, hit_rate: f64, policy_variability: f64) -> Result<Self> {
        let ok = mean_td_error.is_finite()
            && mean_td_error >= 0.0
            && (0.0..=1.0).contains(&hit_rate)
            && policy_variability.is_finite()
            && policy_variability >= 0.0;
        if !ok {
            return Err(Error::OutOfRange(format!(
                "batch metrics (ε̄={mean_td_error}, h={hit_rate}, v={policy_variability})"
            )));
        }
        Ok(Self {
            mean_td_error,
            hit_rate,
            policy_variability,
        })
    }

    /// Metrics at which every surrogate gradient vanishes.
    pub fn fixed_point() -> Self {
        Self {
            mean_td_error: 0.0,
            hit_rate: 1.0,
            policy_variability: 0.0,
        }
    }
}

/// A closed interval used for projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.min, self.max)
    }

    pub fn contains(&self, x: f64) -> bool {
        (self.min..=self.max).contains(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub capacity: Range,
    pub threshold: Range,
    pub refresh: Range,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            capacity: Range::new(100.0, 1000.0),
            threshold: Range::new(0.5, 0.99),
            refresh: Range::new(0.01, 0.2),
        }
    }
}

impl ParamRanges {
    pub fn contains(&self, p: &CacheParams) -> bool {
        self.capacity.contains(p.capacity)
            && self.threshold.contains(p.threshold)
            && self.refresh.contains(p.refresh_rate)
    }

    pub fn project(&self, p: CacheParams) -> CacheParams {
        CacheParams {
            capacity: self.capacity.clip(p.capacity),
            threshold: self.threshold.clip(p.threshold),
            refresh_rate: self.refresh.clip(p.refresh_rate),
        }
    }
}

/// One value per cache parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerParam {
    pub capacity: f64,
    pub threshold: f64,
    pub refresh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Surrogate gradient weights λ.
    pub weights: PerParam,
    /// Learning rates η.
    pub rates: PerParam,
    pub ranges: ParamRanges,
    /// Projection can be disabled to exercise raw updates in tests.
    pub project: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            weights: PerParam {
                capacity: 0.05,
                threshold: 0.1,
                refresh: 0.02,
            },
            rates: PerParam {
                capacity: 1e-3,
                threshold: 5e-4,
                refresh: 1e-4,
            },
            ranges: ParamRanges::default(),
            project: true,
        }
    }
}

impl MetaConfig {
    /// Multiplier applied to the default rates by [`MetaConfig::evolution_demo`].
    pub const DEMO_RATE_SCALE: f64 = 1e4;

    /// Default weights with learning rates scaled so parameter drift is
    /// visible within a desk-scale run.
    pub fn evolution_demo() -> Self {
        let mut cfg = Self::default();
        cfg.rates.capacity *= Self::DEMO_RATE_SCALE;
        cfg.rates.threshold *= Self::DEMO_RATE_SCALE;
        cfg.rates.refresh *= Self::DEMO_RATE_SCALE;
        cfg
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let named = [
            ("meta.lambda_k", self.weights.capacity),
            ("meta.lambda_delta", self.weights.threshold),
            ("meta.lambda_r", self.weights.refresh),
            ("meta.eta_k", self.rates.capacity),
            ("meta.eta_delta", self.rates.threshold),
            ("meta.eta_r", self.rates.refresh),
        ];
        for (k, v) in named {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{k} must be positive, got {v}"));
            }
        }
        let ranges = [
            ("capacity", self.ranges.capacity),
            ("threshold", self.ranges.threshold),
            ("refresh", self.ranges.refresh),
        ];
        for (k, r) in ranges {
            if !(r.min.is_finite() && r.max.is_finite() && r.min <= r.max) {
                errs.push(format!("{k} range [{}, {}] is empty", r.min, r.max));
            }
        }
        if self.ranges.capacity.min <= 0.0 || self.ranges.threshold.min <= 0.0 {
            errs.push("capacity and threshold ranges must be strictly positive".into());
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateGradients {
    pub capacity: f64,
    pub threshold: f64,
    pub refresh: f64,
}

pub fn surrogate_gradients(
    params: &CacheParams,
    m: &BatchMetrics,
    cfg: &MetaConfig,
) -> SurrogateGradients {
    SurrogateGradients {
        capacity: cfg.weights.capacity * (1.0 - m.hit_rate) / params.capacity,
        threshold: -cfg.weights.threshold * m.mean_td_error / params.threshold,
        refresh: cfg.weights.refresh * m.policy_variability,
    }
}

/// One projected ascent step.
pub fn update(params: &CacheParams, m: &BatchMetrics, cfg: &MetaConfig) -> CacheParams {
    let g = surrogate_gradients(params, m, cfg);
    let raw = CacheParams {
        capacity: params.capacity + cfg.rates.capacity * g.capacity,
        threshold: params.threshold + cfg.rates.threshold * g.threshold,
        refresh_rate: params.refresh_rate + cfg.rates.refresh * g.refresh,
    };
    if cfg.project {
        cfg.ranges.project(raw)
    } else {
        raw
    }
}

/// One row of the parameter trajectory log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub seed: u64,
    pub step: u64,
    #[serde(rename = "K")]
    pub capacity: f64,
    #[serde(rename = "delta")]
    pub threshold: f64,
    #[serde(rename = "r")]
    pub refresh_rate: f64,
    #[serde(rename = "h")]
    pub hit_rate: f64,
    #[serde(rename = "td_error")]
    pub mean_td_error: f64,
    #[serde(rename = "variability")]
    pub policy_variability: f64,
}

impl ParamRecord {
    pub fn new(seed: u64, step: u64, p: &CacheParams, m: &BatchMetrics) -> Self {
        Self {
            seed,
            step,
            capacity: p.capacity,
            threshold: p.threshold,
            refresh_rate: p.refresh_rate,
            hit_rate: m.hit_rate,
            mean_td_error: m.mean_td_error,
            policy_variability: m.policy_variability,
        }
    }
}

pub fn write_param_csv<W: Write>(w: W, rows: &[ParamRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
