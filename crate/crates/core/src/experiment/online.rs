//! Online training runs: one agent, one environment, one seed.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{ExperimentConfig, RlConfig};
use super::setup::{build_embedder, build_env, build_provider};
use crate::bound::{perturb_prior, prior_error};
use crate::cache::SemanticCache;
use crate::env::{StateId, Task};
use crate::error::{Error, Result};
use crate::meta::{self, ParamRecord};
use crate::policy::{select_action, temperature, HitWindow, StepTrace, TemperatureSchedule};
use crate::provider::{LatencyModel, PriorProvider, UniformProvider};
use crate::rl::{batch_metrics, GaussianHead, HybridAction, QTable, ReplayBuffer, StepRecord, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cached,
    Uncached,
    StaticCache,
    NoPrior,
    FixedTemperature,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Cached,
        Variant::Uncached,
        Variant::StaticCache,
        Variant::NoPrior,
        Variant::FixedTemperature,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Cached => "cached",
            Variant::Uncached => "uncached",
            Variant::StaticCache => "static_cache",
            Variant::NoPrior => "no_prior",
            Variant::FixedTemperature => "fixed_temperature",
        }
    }

    fn uses_cache(&self) -> bool {
        matches!(self, Variant::Cached | Variant::StaticCache | Variant::FixedTemperature)
    }

    fn adapts(&self) -> bool {
        matches!(self, Variant::Cached | Variant::FixedTemperature)
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

/// Tabular learner. Hybrid tasks fold a bin of `u` into the Q column and
/// draw `u` from a [`GaussianHead`].
#[derive(Debug, Clone)]
pub struct Agent {
    q: QTable,
    head: Option<GaussianHead>,
    n_symbolic: usize,
    u_bins: usize,
    u_samples: usize,
    replay: ReplayBuffer,
    replay_updates: usize,
}

impl Agent {
    pub fn new(task: &dyn Task, rl: &RlConfig) -> Self {
        let n_symbolic = task.n_actions();
        let dim = task.continuous_dim();
        let (head, u_bins) = if dim == 0 {
            (None, 1)
        } else {
            let head = GaussianHead::new(dim, rl.u_init, rl.sigma_start, rl.lr_mean, rl.lr_value);
            (Some(head), rl.u_bins)
        };
        Self {
            q: QTable::new(n_symbolic * u_bins, rl.gamma, rl.lr),
            head,
            n_symbolic,
            u_bins,
            u_samples: rl.u_samples,
            replay: ReplayBuffer::new(rl.replay_capacity),
            replay_updates: rl.replay_updates,
        }
    }

    pub fn q(&self) -> &QTable {
        &self.q
    }

    fn column(&self, action: &HybridAction) -> usize {
        match action.continuous.first() {
            Some(u) if self.head.is_some() => {
                let bin = ((u * self.u_bins as f64) as usize).min(self.u_bins - 1);
                action.symbolic * self.u_bins + bin
            }
            _ => action.symbolic,
        }
    }

    /// `Q(s, a_sym)`; hybrid tasks average over `m` sampled `u`.
    pub fn symbolic_q<R: Rng + ?Sized>(&self, s: StateId, rng: &mut R) -> Vec<f64> {
        let Some(head) = &self.head else {
            return self.q.row(s);
        };
        (0..self.n_symbolic)
            .map(|a| {
                let total: f64 = (0..self.u_samples)
                    .map(|_| {
                        let u = head.sample(s, a, rng);
                        self.q.get(s, self.column(&HybridAction::hybrid(a, u)))
                    })
                    .sum();
                total / self.u_samples as f64
            })
            .collect()
    }

    pub fn complete_action<R: Rng + ?Sized>(&self, s: StateId, a: usize, rng: &mut R) -> HybridAction {
        match &self.head {
            Some(head) => HybridAction::hybrid(a, head.sample(s, a, rng)),
            None => HybridAction::discrete(a),
        }
    }

    /// Online update on `t` followed by replayed updates.
    /// Returns `(|td|, Q(s, a))` measured before the update.
    pub fn learn<R: Rng + ?Sized>(&mut self, t: Transition, rng: &mut R) -> Result<(f64, f64)> {
        let col = self.column(&t.action);
        let q_value = self.q.get(t.state, col);
        let td = self.q.update_index(&t, col);
        if let Some(head) = self.head.as_mut() {
            head.update(&t, self.q.gamma)?;
        }
        self.replay.push(t);
        let replayed: Vec<Transition> = self
            .replay
            .sample(self.replay_updates, rng)
            .into_iter()
            .cloned()
            .collect();
        for r in &replayed {
            let c = self.column(&r.action);
            self.q.update_index(r, c);
        }
        Ok((td, q_value))
    }

    pub fn anneal(&mut self, rl: &RlConfig, progress: f64) {
        if let Some(head) = self.head.as_mut() {
            head.anneal(rl.sigma_start, rl.sigma_end, progress);
        }
    }
}

/// Per-episode metrics row; counters are cumulative within the run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRow {
    pub variant: &'static str,
    pub seed: u64,
    pub episode: usize,
    pub steps: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub success: u8,
    pub queries: u64,
    pub hits: u64,
    pub misses: u64,
    pub refreshes: u64,
    pub hit_rate: f64,
    pub tau: f64,
    #[serde(rename = "K")]
    pub capacity: f64,
    pub delta: f64,
    pub r: f64,
    pub virtual_latency_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencySummary {
    pub hit_rate: f64,
    pub mean_ms: f64,
    pub weighted_mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Nearest-rank percentile of `values` (`p` in `[0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Mean, weighted mean `h·hit + (1−h)·miss`, median and 95th percentile.
pub fn latency_report(per_step_ms: &[f64], hits: u64, lookups: u64, model: &LatencyModel) -> Result<LatencySummary> {
    if lookups == 0 || per_step_ms.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let h = hits as f64 / lookups as f64;
    Ok(LatencySummary {
        hit_rate: h,
        mean_ms: per_step_ms.iter().sum::<f64>() / per_step_ms.len() as f64,
        weighted_mean_ms: model.weighted_mean(h),
        median_ms: percentile(per_step_ms, 50.0),
        p95_ms: percentile(per_step_ms, 95.0),
    })
}

/// Knobs beyond the variant, used by the corollary suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub variant: Variant,
    pub seed: u64,
    pub episodes: usize,
    pub refresh: bool,
    /// Pre-fill the cache with every state's prior perturbed by this σ.
    pub warm_start_sigma: Option<f64>,
    /// Record per-step staleness `κ′` of served cache entries.
    pub track_staleness: bool,
}

impl RunOptions {
    pub fn new(variant: Variant, seed: u64, episodes: usize) -> Self {
        Self {
            variant,
            seed,
            episodes,
            refresh: true,
            warm_start_sigma: None,
            track_staleness: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub variant: Variant,
    pub seed: u64,
    pub episodes: Vec<EpisodeRow>,
    pub params: Vec<ParamRecord>,
    pub step_latency_ms: Vec<f64>,
    pub traces: Vec<StepTrace>,
    /// Per-step `κ′` of the served prior against its source's fresh prior
    /// (0 on a miss); empty unless requested.
    pub staleness: Vec<f64>,
    pub steps: u64,
    pub queries: u64,
    pub hits: u64,
    pub misses: u64,
    pub refreshes: u64,
    pub final_success: f64,
    pub mean_return: f64,
    pub episodes_to_converge: usize,
    pub latency: Option<LatencySummary>,
    /// `queries == misses + refreshes` (or `== steps` without a cache).
    pub accounting_ok: bool,
    pub agent: Agent,
    pub visits: BTreeMap<StateId, u64>,
    pub final_tau: f64,
    pub cache: Option<SemanticCache>,
}

/// First episode (1-based) at which the rolling success rate over `window`
/// episodes reaches 95% of `final_success`.
pub fn episodes_to_converge(success: &[bool], window: usize, final_success: f64) -> usize {
    let target = 0.95 * final_success;
    if success.is_empty() {
        return 0;
    }
    if final_success <= 0.0 {
        return success.len();
    }
    let w = window.min(success.len()).max(1);
    for end in w..=success.len() {
        let rate = success[end - w..end].iter().filter(|s| **s).count() as f64 / w as f64;
        if rate >= target {
            return end;
        }
    }
    success.len()
}

pub fn run_online(cfg: &ExperimentConfig, opts: RunOptions) -> Result<SeedRun> {
    let mut env = build_env(cfg)?;
    let task = env.task();
    let embedder = build_embedder(cfg, task.clone());
    let mut provider: Box<dyn PriorProvider> = match opts.variant {
        Variant::NoPrior => Box::new(UniformProvider::new(task.n_actions())),
        _ => build_provider(cfg, task.clone())?,
    };
    let schedule = match opts.variant {
        Variant::FixedTemperature => TemperatureSchedule::fixed(cfg.schedule.base),
        _ => cfg.schedule,
    };
    let rl = &cfg.rl;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut agent = Agent::new(task.as_ref(), rl);
    let mut cache = opts.variant.uses_cache().then(|| SemanticCache::new(cfg.cache));

    if let (Some(sigma), Some(c)) = (opts.warm_start_sigma, cache.as_mut()) {
        let mock = provider.adaptable().ok_or(Error::NotAdaptable)?;
        let states: Vec<StateId> = reachable_states(task.as_ref(), cfg)?;
        for s in states {
            let stale = perturb_prior(&mock.peek(s)?, sigma, &mut rng)?;
            c.insert(embedder.embed(s)?, stale, s, 0)?;
        }
    }

    let mut window = HitWindow::new(rl.hit_window);
    let mut visits: BTreeMap<StateId, u64> = BTreeMap::new();
    let mut density: HashMap<StateId, f64> = HashMap::new();
    let mut batch: Vec<StepRecord> = Vec::with_capacity(rl.batch_size);
    let mut out = SeedRun {
        variant: opts.variant,
        seed: opts.seed,
        episodes: Vec::with_capacity(opts.episodes),
        params: Vec::new(),
        step_latency_ms: Vec::new(),
        traces: Vec::new(),
        staleness: Vec::new(),
        steps: 0,
        queries: 0,
        hits: 0,
        misses: 0,
        refreshes: 0,
        final_success: 0.0,
        mean_return: 0.0,
        episodes_to_converge: 0,
        latency: None,
        accounting_ok: true,
        agent: agent.clone(),
        visits: BTreeMap::new(),
        final_tau: schedule.base,
        cache: None,
    };
    let latency = cfg.provider.latency;
    let mut tau = schedule.base;
    let mut successes = Vec::with_capacity(opts.episodes);

    for episode in 0..opts.episodes {
        agent.anneal(rl, episode as f64 / opts.episodes.max(2).saturating_sub(1) as f64);
        let mut s = env.reset(&mut rng);
        let mut ret = 0.0;
        let mut steps = 0;
        loop {
            out.steps += 1;
            let now = out.steps;
            tau = temperature(window.rate(), &schedule)?;
            let key = embedder.embed(s)?;
            if opts.track_staleness {
                out.staleness.push(staleness(cache.as_ref(), &key, provider.as_mut())?);
            }
            let q = agent.symbolic_q(s, &mut rng);
            let trace = select_action(
                s,
                &key,
                cache.as_mut(),
                provider.as_mut(),
                &q,
                tau,
                rl.candidates,
                &mut rng,
                now,
            )?;
            if cache.is_some() {
                window.push(trace.hit);
            }
            out.step_latency_ms.push(match opts.variant {
                Variant::NoPrior => 0.0,
                _ => latency.cost(trace.hit),
            });
            let action = agent.complete_action(s, trace.action, &mut rng);
            let hit = trace.hit;
            if cfg.run.trace {
                out.traces.push(trace);
            }
            let step = env.step(&action)?;
            ret += step.reward;
            steps += 1;
            let t = Transition {
                state: s,
                action,
                reward: step.reward,
                next_state: step.next,
                done: step.done,
            };
            let (td, q_value) = agent.learn(t, &mut rng)?;
            *visits.entry(s).or_insert(0) += 1;
            *density.entry(s).or_insert(0.0) += 1.0;
            batch.push(StepRecord {
                td_error: td,
                hit,
                q_value,
            });
            if batch.len() == rl.batch_size {
                let m = batch_metrics(&batch)?;
                batch.clear();
                if let Some(c) = cache.as_mut() {
                    if opts.variant.adapts() {
                        let next = meta::update(c.params(), &m, &cfg.meta);
                        c.set_params(next);
                    }
                    out.params.push(ParamRecord::new(opts.seed, now, c.params(), &m));
                }
            }
            if let (Some(c), true) = (cache.as_mut(), opts.refresh) {
                out.refreshes += c.refresh_step(&density, provider.as_mut(), &mut rng, now)? as u64;
            }
            s = step.next;
            if step.finished() {
                break;
            }
        }
        let success = env.succeeded();
        successes.push(success);
        let (hits, misses) = cache.as_ref().map_or((0, out.steps), |c| (c.hits(), c.misses()));
        let params = cache.as_ref().map(|c| *c.params());
        out.episodes.push(EpisodeRow {
            variant: opts.variant.label(),
            seed: opts.seed,
            episode,
            steps,
            episode_return: ret,
            success: success as u8,
            queries: provider.stats().query_count,
            hits,
            misses,
            refreshes: out.refreshes,
            hit_rate: if hits + misses == 0 { 0.0 } else { hits as f64 / (hits + misses) as f64 },
            tau,
            capacity: params.map_or(f64::NAN, |p| p.capacity),
            delta: params.map_or(f64::NAN, |p| p.threshold),
            r: params.map_or(f64::NAN, |p| p.refresh_rate),
            virtual_latency_ms: provider.stats().simulated_latency_total,
        });
    }

    out.queries = provider.stats().query_count;
    let (hits, misses) = cache.as_ref().map_or((0, out.steps), |c| (c.hits(), c.misses()));
    out.hits = hits;
    out.misses = misses;
    out.accounting_ok = match opts.variant {
        Variant::NoPrior => out.queries == 0,
        _ if cache.is_some() => out.queries == misses + out.refreshes,
        _ => out.queries == out.steps,
    };
    let tail = cfg.run.eval_window.min(successes.len()).max(1);
    out.final_success =
        successes[successes.len() - tail..].iter().filter(|s| **s).count() as f64 / tail as f64;
    out.mean_return = out.episodes.iter().map(|e| e.episode_return).sum::<f64>()
        / out.episodes.len().max(1) as f64;
    out.episodes_to_converge =
        episodes_to_converge(&successes, cfg.run.converge_window, out.final_success);
    if opts.variant != Variant::NoPrior {
        out.latency = Some(latency_report(&out.step_latency_ms, hits, hits + misses, &latency)?);
    }
    out.final_tau = tau;
    out.agent = agent;
    out.visits = visits;
    out.cache = cache;
    Ok(out)
}

/// States reachable in the task; TextGrid enumerates all, PointReach uses
/// its cell grid.
fn reachable_states(task: &dyn Task, cfg: &ExperimentConfig) -> Result<Vec<StateId>> {
    let n = match task.name() {
        "textgrid" => cfg.textgrid.size * cfg.textgrid.size * 2,
        _ => cfg.pointreach.grid * cfg.pointreach.grid,
    };
    Ok((0..n as u64).map(StateId).collect())
}

/// `κ′` between the entry a lookup would serve and its source's fresh prior.
fn staleness(
    cache: Option<&SemanticCache>,
    key: &crate::embedding::Embedding,
    provider: &mut dyn PriorProvider,
) -> Result<f64> {
    let Some(cache) = cache else { return Ok(0.0) };
    match cache.peek(key) {
        Some((entry, sim)) if sim > cache.params().threshold => {
            let mock = provider.adaptable().ok_or(Error::NotAdaptable)?;
            Ok(prior_error(&entry.prior, &mock.peek(entry.source_state_id)?))
        }
        _ => Ok(0.0),
    }
}

/// Runs one seed per thread; results come back in seed order.
pub fn run_seeds(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    make: impl Fn(u64) -> RunOptions + Sync,
) -> Result<Vec<SeedRun>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let make = &make;
                scope.spawn(move || run_online(cfg, make(seed)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed thread panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

/// Seed-aggregated metrics of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub seeds: usize,
    pub final_success: MeanStd,
    pub mean_return: MeanStd,
    pub episodes_to_converge: MeanStd,
    pub queries: MeanStd,
    pub hit_rate: MeanStd,
    pub latency_mean_ms: MeanStd,
    pub latency_weighted_ms: MeanStd,
    pub latency_p95_ms: MeanStd,
    pub accounting_ok: bool,
}

impl VariantSummary {
    pub fn of(variant: Variant, runs: &[SeedRun]) -> Self {
        let col = |f: &dyn Fn(&SeedRun) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        let lat = |f: &dyn Fn(&LatencySummary) -> f64| {
            col(&|r: &SeedRun| r.latency.as_ref().map_or(0.0, f))
        };
        Self {
            variant,
            seeds: runs.len(),
            final_success: col(&|r| r.final_success),
            mean_return: col(&|r| r.mean_return),
            episodes_to_converge: col(&|r| r.episodes_to_converge as f64),
            queries: col(&|r| r.queries as f64),
            hit_rate: col(&|r| {
                let n = r.hits + r.misses;
                if n == 0 { 0.0 } else { r.hits as f64 / n as f64 }
            }),
            latency_mean_ms: lat(&|l| l.mean_ms),
            latency_weighted_ms: lat(&|l| l.weighted_mean_ms),
            latency_p95_ms: lat(&|l| l.p95_ms),
            accounting_ok: runs.iter().all(|r| r.accounting_ok),
        }
    }
}

pub fn write_summaries<W: Write>(w: W, rows: &[VariantSummary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "variant",
        "seeds",
        "final_success_mean",
        "final_success_std",
        "mean_return_mean",
        "mean_return_std",
        "episodes_to_converge_mean",
        "episodes_to_converge_std",
        "queries_mean",
        "queries_std",
        "hit_rate_mean",
        "hit_rate_std",
        "latency_mean_ms_mean",
        "latency_mean_ms_std",
        "latency_weighted_ms_mean",
        "latency_weighted_ms_std",
        "latency_p95_ms_mean",
        "latency_p95_ms_std",
        "accounting_ok",
    ])?;
    for r in rows {
        let mut rec = vec![r.variant.label().to_string(), r.seeds.to_string()];
        for m in [
            r.final_success,
            r.mean_return,
            r.episodes_to_converge,
            r.queries,
            r.hit_rate,
            r.latency_mean_ms,
            r.latency_weighted_ms,
            r.latency_p95_ms,
        ] {
            rec.push(m.mean.to_string());
            rec.push(m.std.to_string());
        }
        rec.push((r.accounting_ok as u8).to_string());
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_episodes<W: Write>(w: W, runs: &[SeedRun]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in runs {
        for e in &r.episodes {
            out.serialize(e)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_traces<W: Write>(mut w: W, runs: &[SeedRun]) -> Result<()> {
    for r in runs {
        for t in &r.traces {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}
