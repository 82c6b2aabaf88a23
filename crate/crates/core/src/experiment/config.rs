//! Flat `key = value` experiment configuration.
//!
//! Every recognized key has a default in [`DEFAULTS`]; a config file only
//! lists overrides. Unknown keys, duplicate keys, unparsable values and
//! out-of-range settings are all collected and reported together.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::cache::CacheParams;
use crate::cql::CQLConfig;
use crate::embedding::EmbeddingMode;
use crate::env::{BehaviorPolicy, PointReachConfig, TextGridConfig};
use crate::error::{Error, Result};
use crate::meta::{MetaConfig, ParamRanges, PerParam, Range};
use crate::policy::TemperatureSchedule;
use crate::provider::{Fallback, LatencyModel};

pub const DEFAULTS: &[(&str, &str)] = &[
    ("env.name", "textgrid"),
    ("textgrid.size", "5"),
    ("textgrid.key_row", "0"),
    ("textgrid.key_col", "4"),
    ("textgrid.door_row", "4"),
    ("textgrid.door_col", "0"),
    ("textgrid.max_steps", "60"),
    ("pointreach.goal_x", "0.8"),
    ("pointreach.goal_y", "0.8"),
    ("pointreach.tolerance", "0.05"),
    ("pointreach.max_steps", "40"),
    ("pointreach.step_size", "0.2"),
    ("pointreach.grid", "10"),
    ("embedding.mode", "numeric"),
    ("embedding.dim", "64"),
    ("embedding.seed", "0"),
    ("embedding.buckets", "8"),
    ("cache.k0", "500"),
    ("cache.delta0", "0.8"),
    ("cache.r0", "0.1"),
    ("cache.k_min", "100"),
    ("cache.k_max", "1000"),
    ("cache.delta_min", "0.5"),
    ("cache.delta_max", "0.99"),
    ("cache.r_min", "0.01"),
    ("cache.r_max", "0.2"),
    ("meta.lambda_k", "0.05"),
    ("meta.lambda_delta", "0.1"),
    ("meta.lambda_r", "0.02"),
    ("meta.eta_k", "0.001"),
    ("meta.eta_delta", "0.0005"),
    ("meta.eta_r", "0.0001"),
    ("meta.rate_scale", "1"),
    ("meta.batch_size", "64"),
    ("schedule.base", "0.8"),
    ("schedule.decay", "2.0"),
    ("schedule.floor", "0.1"),
    ("schedule.window", "500"),
    ("policy.k", "5"),
    ("policy.u_samples", "4"),
    ("provider.kind", "mock"),
    ("provider.sharpness", "3.0"),
    ("provider.latency.hit_ms", "18.7"),
    ("provider.latency.miss_ms", "349"),
    ("provider.remote.url", ""),
    ("provider.remote.timeout_ms", "5000"),
    ("provider.remote.fallback", "abort"),
    ("provider.fewshot.enabled", "true"),
    ("provider.fewshot.shots", "5"),
    ("provider.fewshot.lambda_ent", "0.01"),
    ("provider.fewshot.steps", "2000"),
    ("provider.fewshot.lr", "0.1"),
    ("provider.fewshot.seed", "0"),
    ("rl.gamma", "0.95"),
    ("rl.lr", "0.5"),
    ("rl.replay_capacity", "10000"),
    ("rl.replay_updates", "4"),
    ("rl.sigma_start", "0.3"),
    ("rl.sigma_end", "0.05"),
    ("rl.u_bins", "4"),
    ("rl.u_init", "0.5"),
    ("rl.lr_mean", "0.5"),
    ("rl.lr_value", "0.2"),
    ("run.episodes", "200"),
    ("run.seeds", "0,1,2,3,4"),
    ("run.trace", "false"),
    ("run.eval_window", "50"),
    ("run.converge_window", "20"),
    ("offline.behavior", "random"),
    ("offline.episodes", "180"),
    ("offline.alpha", "0.02"),
    ("offline.beta", "0.002"),
    ("offline.epochs", "300"),
    ("offline.lr", "0.1"),
    ("offline.gamma", "0.95"),
    ("offline.batch_size", "64"),
    ("offline.eval_every", "10"),
    ("offline.window", "50"),
    ("offline.tolerance", "0.01"),
    ("offline.random_rollouts", "10"),
    ("offline.meta_rate_scale", "3000"),
    ("bound.noise_levels", "0,0.1,0.2,0.4"),
    ("bound.samples", "500"),
    ("bound.seed", "0"),
    ("corollary.windows", "8"),
    ("corollary.stale_sigma", "1.0"),
    ("corollary.episodes", "200"),
    ("latency.episodes", "20"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    TextGrid,
    PointReach,
}

impl FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "textgrid" => Ok(Self::TextGrid),
            "pointreach" => Ok(Self::PointReach),
            other => Err(format!("unknown environment `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Mock,
    Remote,
}

impl FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mock" => Ok(Self::Mock),
            "remote" => Ok(Self::Remote),
            other => Err(format!("unknown provider `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingConfig {
    pub mode: EmbeddingMode,
    pub dim: usize,
    pub seed: u64,
    pub buckets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FewShotConfig {
    pub enabled: bool,
    pub shots: usize,
    pub lambda_ent: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub sharpness: f64,
    pub latency: LatencyModel,
    pub remote_url: Option<String>,
    pub timeout: Duration,
    pub fallback: Fallback,
    pub fewshot: FewShotConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlConfig {
    pub gamma: f64,
    pub lr: f64,
    pub replay_capacity: usize,
    pub replay_updates: usize,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub u_bins: usize,
    pub u_init: f64,
    pub lr_mean: f64,
    pub lr_value: f64,
    /// Candidate count `k`.
    pub candidates: usize,
    /// Monte-Carlo samples of `u` per symbolic Q estimate.
    pub u_samples: usize,
    /// Transitions per meta-optimizer update.
    pub batch_size: usize,
    /// Sliding window for the hit rate that drives `τ`.
    pub hit_window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub trace: bool,
    /// Episodes averaged for the final success rate.
    pub eval_window: usize,
    /// Rolling window for episodes-to-convergence.
    pub converge_window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSuiteConfig {
    pub behavior: BehaviorPolicy,
    pub episodes: usize,
    pub cql: CQLConfig,
    pub random_rollouts: usize,
    pub meta_rate_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundConfig {
    pub noise_levels: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorollaryConfig {
    pub windows: usize,
    pub stale_sigma: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub textgrid: TextGridConfig,
    pub pointreach: PointReachConfig,
    pub embedding: EmbeddingConfig,
    pub cache: CacheParams,
    pub meta: MetaConfig,
    pub schedule: TemperatureSchedule,
    pub provider: ProviderConfig,
    pub rl: RlConfig,
    pub run: RunConfig,
    pub offline: OfflineSuiteConfig,
    pub bound: BoundConfig,
    pub corollary: CorollaryConfig,
    pub latency_episodes: usize,
    /// Every setting after overrides, in key order.
    settings: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults are valid")
    }
}

struct Reader<'a> {
    map: &'a BTreeMap<String, String>,
    errs: Vec<String>,
}

impl Reader<'_> {
    fn get<T: FromStr>(&mut self, key: &str) -> T
    where
        T::Err: Display,
    {
        let raw = &self.map[key];
        match raw.parse::<T>() {
            Ok(v) => v,
            Err(e) => {
                self.errs.push(format!("{key} = `{raw}`: {e}"));
                let default = DEFAULTS.iter().find(|(k, _)| *k == key).expect("known key").1;
                default.parse().ok().expect("default parses")
            }
        }
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Vec<T>
    where
        T::Err: Display,
    {
        let raw = self.map[key].clone();
        let mut out = Vec::new();
        for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.parse::<T>() {
                Ok(v) => out.push(v),
                Err(e) => self.errs.push(format!("{key}: element `{part}`: {e}")),
            }
        }
        out
    }
}

/// Splits `key = value` lines; `#` starts a comment.
fn parse_lines(text: &str) -> (Vec<(String, String)>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut errs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                pairs.push((k.trim().to_string(), v.trim().to_string()))
            }
            _ => errs.push(format!("line {}: expected `key = value`, got `{line}`", n + 1)),
        }
    }
    (pairs, errs)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    /// Parses `text`, then applies `overrides` (e.g. from the command line).
    pub fn parse_with(text: &str, overrides: &[(&str, String)]) -> Result<Self> {
        let mut map: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let (pairs, mut errs) = parse_lines(text);
        let mut seen = std::collections::BTreeSet::new();
        for (k, v) in pairs {
            if !map.contains_key(&k) {
                errs.push(format!("unknown key `{k}`"));
                continue;
            }
            if !seen.insert(k.clone()) {
                errs.push(format!("duplicate key `{k}`"));
                continue;
            }
            map.insert(k, v);
        }
        for (k, v) in overrides {
            if !map.contains_key(*k) {
                errs.push(format!("unknown key `{k}`"));
                continue;
            }
            map.insert(k.to_string(), v.clone());
        }
        let mut r = Reader { map: &map, errs };
        let cfg = Self::build(&mut r);
        let mut errs = r.errs;
        errs.extend(cfg.validate());
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(cfg)
    }

    fn build(r: &mut Reader<'_>) -> Self {
        let textgrid = TextGridConfig {
            size: r.get("textgrid.size"),
            key: (r.get("textgrid.key_row"), r.get("textgrid.key_col")),
            door: (r.get("textgrid.door_row"), r.get("textgrid.door_col")),
            max_steps: r.get("textgrid.max_steps"),
        };
        let pointreach = PointReachConfig {
            goal: (r.get("pointreach.goal_x"), r.get("pointreach.goal_y")),
            tolerance: r.get("pointreach.tolerance"),
            max_steps: r.get("pointreach.max_steps"),
            step_size: r.get("pointreach.step_size"),
            grid: r.get("pointreach.grid"),
        };
        let embedding = EmbeddingConfig {
            mode: r.get("embedding.mode"),
            dim: r.get("embedding.dim"),
            seed: r.get("embedding.seed"),
            buckets: r.get("embedding.buckets"),
        };
        let cache = CacheParams {
            capacity: r.get("cache.k0"),
            threshold: r.get("cache.delta0"),
            refresh_rate: r.get("cache.r0"),
        };
        let scale: f64 = r.get("meta.rate_scale");
        let meta = MetaConfig {
            weights: PerParam {
                capacity: r.get("meta.lambda_k"),
                threshold: r.get("meta.lambda_delta"),
                refresh: r.get("meta.lambda_r"),
            },
            rates: PerParam {
                capacity: scale * r.get::<f64>("meta.eta_k"),
                threshold: scale * r.get::<f64>("meta.eta_delta"),
                refresh: scale * r.get::<f64>("meta.eta_r"),
            },
            ranges: ParamRanges {
                capacity: Range::new(r.get("cache.k_min"), r.get("cache.k_max")),
                threshold: Range::new(r.get("cache.delta_min"), r.get("cache.delta_max")),
                refresh: Range::new(r.get("cache.r_min"), r.get("cache.r_max")),
            },
            project: true,
        };
        let schedule = TemperatureSchedule {
            base: r.get("schedule.base"),
            decay: r.get("schedule.decay"),
            floor: r.get("schedule.floor"),
        };
        let url: String = r.get("provider.remote.url");
        let provider = ProviderConfig {
            kind: r.get("provider.kind"),
            sharpness: r.get("provider.sharpness"),
            latency: LatencyModel {
                hit_cost_ms: r.get("provider.latency.hit_ms"),
                miss_cost_ms: r.get("provider.latency.miss_ms"),
            },
            remote_url: (!url.is_empty()).then_some(url),
            timeout: Duration::from_millis(r.get("provider.remote.timeout_ms")),
            fallback: r.get("provider.remote.fallback"),
            fewshot: FewShotConfig {
                enabled: r.get("provider.fewshot.enabled"),
                shots: r.get("provider.fewshot.shots"),
                lambda_ent: r.get("provider.fewshot.lambda_ent"),
                steps: r.get("provider.fewshot.steps"),
                lr: r.get("provider.fewshot.lr"),
                seed: r.get("provider.fewshot.seed"),
            },
        };
        let rl = RlConfig {
            gamma: r.get("rl.gamma"),
            lr: r.get("rl.lr"),
            replay_capacity: r.get("rl.replay_capacity"),
            replay_updates: r.get("rl.replay_updates"),
            sigma_start: r.get("rl.sigma_start"),
            sigma_end: r.get("rl.sigma_end"),
            u_bins: r.get("rl.u_bins"),
            u_init: r.get("rl.u_init"),
            lr_mean: r.get("rl.lr_mean"),
            lr_value: r.get("rl.lr_value"),
            candidates: r.get("policy.k"),
            u_samples: r.get("policy.u_samples"),
            batch_size: r.get("meta.batch_size"),
            hit_window: r.get("schedule.window"),
        };
        let run = RunConfig {
            episodes: r.get("run.episodes"),
            seeds: r.list("run.seeds"),
            trace: r.get("run.trace"),
            eval_window: r.get("run.eval_window"),
            converge_window: r.get("run.converge_window"),
        };
        let offline = OfflineSuiteConfig {
            behavior: r.get("offline.behavior"),
            episodes: r.get("offline.episodes"),
            cql: CQLConfig {
                alpha: r.get("offline.alpha"),
                beta: r.get("offline.beta"),
                epochs: r.get("offline.epochs"),
                lr: r.get("offline.lr"),
                gamma: r.get("offline.gamma"),
                batch_size: r.get("offline.batch_size"),
                eval_every: r.get("offline.eval_every"),
                window: r.get("offline.window"),
                tolerance: r.get("offline.tolerance"),
            },
            random_rollouts: r.get("offline.random_rollouts"),
            meta_rate_scale: r.get("offline.meta_rate_scale"),
        };
        let bound = BoundConfig {
            noise_levels: r.list("bound.noise_levels"),
            samples: r.get("bound.samples"),
            seed: r.get("bound.seed"),
        };
        let corollary = CorollaryConfig {
            windows: r.get("corollary.windows"),
            stale_sigma: r.get("corollary.stale_sigma"),
            episodes: r.get("corollary.episodes"),
        };
        Self {
            env: r.get("env.name"),
            textgrid,
            pointreach,
            embedding,
            cache,
            meta,
            schedule,
            provider,
            rl,
            run,
            offline,
            bound,
            corollary,
            latency_episodes: r.get("latency.episodes"),
            settings: r.map.clone(),
        }
    }

    /// Every problem with the configuration, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        errs.extend(self.textgrid.validate());
        errs.extend(self.pointreach.validate());
        errs.extend(self.meta.validate());
        errs.extend(self.schedule.validate());
        errs.extend(self.provider.latency.validate());
        errs.extend(self.offline.cql.validate());
        if self.embedding.dim == 0 {
            errs.push("embedding.dim must be positive".into());
        }
        if self.embedding.buckets == 0 {
            errs.push("embedding.buckets must be positive".into());
        }
        if !self.meta.ranges.contains(&self.cache) {
            errs.push(format!(
                "initial cache parameters (K={}, δ={}, r={}) lie outside their ranges",
                self.cache.capacity, self.cache.threshold, self.cache.refresh_rate
            ));
        }
        if !(self.provider.sharpness > 0.0 && self.provider.sharpness.is_finite()) {
            errs.push(format!(
                "provider.sharpness must be positive, got {}",
                self.provider.sharpness
            ));
        }
        if self.provider.kind == ProviderKind::Remote {
            if self.provider.remote_url.is_none() {
                errs.push("provider.kind = remote requires provider.remote.url".into());
            }
            if self.provider.fewshot.enabled {
                errs.push("provider.fewshot.enabled requires the mock provider".into());
            }
        }
        let fs = &self.provider.fewshot;
        if fs.enabled {
            if fs.shots == 0 {
                errs.push("provider.fewshot.shots must be positive".into());
            }
            if !(fs.lambda_ent >= 0.0) {
                errs.push("provider.fewshot.lambda_ent must be >= 0".into());
            }
            if !(fs.lr > 0.0) {
                errs.push("provider.fewshot.lr must be positive".into());
            }
        }
        let rl = &self.rl;
        if !(0.0..1.0).contains(&rl.gamma) {
            errs.push(format!("rl.gamma must lie in [0, 1), got {}", rl.gamma));
        }
        if !(rl.lr > 0.0 && rl.lr <= 1.0) {
            errs.push(format!("rl.lr must lie in (0, 1], got {}", rl.lr));
        }
        if rl.replay_capacity == 0 {
            errs.push("rl.replay_capacity must be positive".into());
        }
        if !(rl.sigma_start > 0.0 && rl.sigma_end > 0.0) {
            errs.push("rl.sigma_start and rl.sigma_end must be positive".into());
        }
        if rl.u_bins == 0 || rl.u_samples == 0 {
            errs.push("rl.u_bins and policy.u_samples must be positive".into());
        }
        if !(0.0..=1.0).contains(&rl.u_init) {
            errs.push("rl.u_init must lie in [0, 1]".into());
        }
        if rl.candidates == 0 {
            errs.push("policy.k must be >= 1".into());
        }
        if rl.batch_size == 0 || rl.hit_window == 0 {
            errs.push("meta.batch_size and schedule.window must be positive".into());
        }
        if self.run.seeds.is_empty() {
            errs.push("run.seeds must list at least one seed".into());
        }
        if self.run.episodes == 0 || self.run.eval_window == 0 || self.run.converge_window == 0 {
            errs.push("run.episodes, run.eval_window and run.converge_window must be positive".into());
        }
        if self.offline.episodes == 0 || self.offline.random_rollouts == 0 {
            errs.push("offline.episodes and offline.random_rollouts must be positive".into());
        }
        if !(self.offline.meta_rate_scale > 0.0) {
            errs.push("offline.meta_rate_scale must be positive".into());
        }
        if self.bound.noise_levels.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            errs.push("bound.noise_levels must be finite and >= 0".into());
        }
        if self.bound.samples == 0 {
            errs.push("bound.samples must be positive".into());
        }
        if self.corollary.windows < 3 {
            errs.push("corollary.windows must be >= 3".into());
        }
        if self.corollary.episodes < self.corollary.windows {
            errs.push("corollary.episodes must be >= corollary.windows".into());
        }
        if !(self.corollary.stale_sigma >= 0.0) {
            errs.push("corollary.stale_sigma must be >= 0".into());
        }
        if self.latency_episodes == 0 {
            errs.push("latency.episodes must be positive".into());
        }
        errs
    }

    /// All settings as sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        self.settings
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of [`ExperimentConfig::canonical`], hex-encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Meta-optimizer with learning rates multiplied by `scale`.
    pub fn meta_scaled(&self, scale: f64) -> MetaConfig {
        let mut m = self.meta;
        m.rates.capacity *= scale;
        m.rates.threshold *= scale;
        m.rates.refresh *= scale;
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.run.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.cache, CacheParams::default());
        assert_eq!(cfg.meta, MetaConfig::default());
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = ExperimentConfig::parse("# comment\ncache.k0 = 200 # inline\nrun.seeds = 7, 9\n")
            .unwrap();
        assert_eq!(cfg.cache.capacity, 200.0);
        assert_eq!(cfg.run.seeds, vec![7, 9]);
    }

    #[test]
    fn all_errors_are_reported() {
        let err = ExperimentConfig::parse("bogus = 1\ncache.k0 = abc\nrl.gamma = 1.5\nnot a pair\n")
            .unwrap_err();
        let Error::Config(msgs) = err else {
            panic!("expected config error")
        };
        assert_eq!(msgs.len(), 4, "{msgs:?}");
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(ExperimentConfig::parse("cache.k0 = 200\ncache.k0 = 300\n").is_err());
    }

    #[test]
    fn rate_scale_multiplies_rates() {
        let cfg = ExperimentConfig::parse("meta.rate_scale = 10000").unwrap();
        assert_eq!(cfg.meta, MetaConfig::evolution_demo());
    }

    #[test]
    fn hash_tracks_settings() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::parse("cache.k0 = 400").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
    }
}
