//! Tabular conservative Q-learning with an optional prior term:
//!
//! ```text
//! L(Q) = L_TD(Q) + α · E_s[logsumexp_a Q(s,a) − E_{π̂β}[Q(s,·)]] − β · E_s[E_prior[Q(s,·)]]
//! ```
//!
//! `L_TD` regresses onto a target table frozen at the start of each epoch,
//! so each epoch is one round of fitted Q iteration and the analytic
//! gradient is exact.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheParams, SemanticCache};
use crate::distribution::PriorDistribution;
use crate::embedding::StateEmbedder;
use crate::env::{OfflineDataset, StateId};
use crate::error::{Error, Result};
use crate::meta::{self, BatchMetrics, MetaConfig};
use crate::policy::fetch_prior;
use crate::provider::PriorProvider;
use crate::rl::{QTable, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CQLConfig {
    /// Conservatism weight.
    pub alpha: f64,
    /// Prior weight.
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Convergence requires `window` epochs within `tolerance` of the final value.
    pub window: usize,
    pub tolerance: f64,
}

impl Default for CQLConfig {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            beta: 0.002,
            epochs: 300,
            lr: 0.1,
            gamma: 0.95,
            batch_size: 64,
            eval_every: 10,
            window: 50,
            tolerance: 0.01,
        }
    }
}

impl CQLConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (k, v) in [("offline.alpha", self.alpha), ("offline.beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{k} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("offline.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            errs.push(format!("offline.gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            errs.push("offline.epochs, offline.batch_size and offline.eval_every must be positive".into());
        }
        if !(self.tolerance >= 0.0) {
            errs.push(format!("offline.tolerance must be >= 0, got {}", self.tolerance));
        }
        errs
    }
}

/// Empirical state-conditional action frequencies with add-`smoothing`.
pub fn behavior_policy(
    transitions: &[Transition],
    n_actions: usize,
    smoothing: f64,
) -> BTreeMap<StateId, PriorDistribution> {
    let mut counts: BTreeMap<StateId, Vec<f64>> = BTreeMap::new();
    for t in transitions {
        counts
            .entry(t.state)
            .or_insert_with(|| vec![smoothing; n_actions])[t.action.symbolic] += 1.0;
    }
    counts
        .into_iter()
        .map(|(s, c)| (s, PriorDistribution::from_weights(c).expect("positive counts")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub td: f64,
    pub conservative: f64,
    pub prior: f64,
    pub total: f64,
}

pub type Gradient = BTreeMap<StateId, Vec<f64>>;

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Loss and its gradient with respect to every Q entry touched by `batch`.
///
/// `prior` may be `None` only when `cfg.beta == 0`.
pub fn cql_prior_loss(
    q: &QTable,
    target: &QTable,
    batch: &[Transition],
    behavior: &BTreeMap<StateId, PriorDistribution>,
    prior: Option<&BTreeMap<StateId, PriorDistribution>>,
    cfg: &CQLConfig,
) -> Result<(LossTerms, Gradient)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if prior.is_none() && cfg.beta != 0.0 {
        return Err(Error::InvalidPrior("prior term requested without priors".into()));
    }
    let n = batch.len() as f64;
    let na = q.n_actions();
    let mut terms = LossTerms {
        td: 0.0,
        conservative: 0.0,
        prior: 0.0,
        total: 0.0,
    };
    let mut grad: Gradient = BTreeMap::new();
    for t in batch {
        let row = q.row(t.state);
        let g = grad.entry(t.state).or_insert_with(|| vec![0.0; na]);

        let bootstrap = if t.done {
            0.0
        } else {
            cfg.gamma * target.max_value(t.next_state)
        };
        let resid = t.reward + bootstrap - row[t.action.symbolic];
        terms.td += resid * resid / n;
        g[t.action.symbolic] -= 2.0 * resid / n;

        if cfg.alpha != 0.0 {
            let pb = behavior
                .get(&t.state)
                .ok_or(Error::MissingState(t.state, "behavior"))?;
            let lse = logsumexp(&row);
            let eb: f64 = pb.probs().iter().zip(&row).map(|(p, v)| p * v).sum();
            terms.conservative += (lse - eb) / n;
            for a in 0..na {
                g[a] += cfg.alpha * ((row[a] - lse).exp() - pb.prob(a)) / n;
            }
        }

        if let Some(priors) = prior {
            let pp = priors
                .get(&t.state)
                .ok_or(Error::MissingState(t.state, "prior"))?;
            terms.prior += pp.probs().iter().zip(&row).map(|(p, v)| p * v).sum::<f64>() / n;
            for a in 0..na {
                g[a] -= cfg.beta * pp.prob(a) / n;
            }
        }
    }
    terms.total = terms.td + cfg.alpha * terms.conservative - cfg.beta * terms.prior;
    Ok((terms, grad))
}

/// Mean over dataset transitions of `logsumexp_a Q(s, a)`.
pub fn mean_logsumexp(q: &QTable, transitions: &[Transition]) -> f64 {
    transitions
        .iter()
        .map(|t| logsumexp(&q.row(t.state)))
        .sum::<f64>()
        / transitions.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSourceKind {
    None,
    Uncached,
    StaticCache,
    AdaptiveCache,
}

impl PriorSourceKind {
    pub const ALL: [PriorSourceKind; 4] = [
        Self::None,
        Self::Uncached,
        Self::StaticCache,
        Self::AdaptiveCache,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Uncached => "uncached",
            Self::StaticCache => "static_cache",
            Self::AdaptiveCache => "adaptive_cache",
        }
    }
}

impl std::str::FromStr for PriorSourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| format!("unknown prior source `{s}`"))
    }
}

/// How dataset states obtain priors.
pub enum PriorSource<'a> {
    None,
    /// One provider query per distinct dataset state.
    Uncached { provider: &'a mut dyn PriorProvider },
    /// Every transition of the first pass consults the cache. With `meta`
    /// set, the cache parameters adapt once per minibatch.
    Cached {
        provider: &'a mut dyn PriorProvider,
        embedder: &'a StateEmbedder,
        params: CacheParams,
        meta: Option<MetaConfig>,
    },
}

impl PriorSource<'_> {
    pub fn kind(&self) -> PriorSourceKind {
        match self {
            Self::None => PriorSourceKind::None,
            Self::Uncached { .. } => PriorSourceKind::Uncached,
            Self::Cached { meta: None, .. } => PriorSourceKind::StaticCache,
            Self::Cached { meta: Some(_), .. } => PriorSourceKind::AdaptiveCache,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub performance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineResult {
    pub q: QTable,
    pub curve: Vec<EvalPoint>,
    pub epochs_to_converge: usize,
    pub final_performance: f64,
    pub queries: u64,
    pub distinct_states: usize,
    /// `None` when no prior is used.
    pub query_ratio: Option<f64>,
    /// Final `(K, δ, r)` of the cache, if one was used.
    pub final_params: Option<CacheParams>,
}

/// First evaluated epoch `e` such that every evaluation in `[e, e + window]`
/// is within `tol` of the final one. Falls back to the last epoch.
pub fn epochs_to_converge(curve: &[EvalPoint], window: usize, tol: f64) -> usize {
    let Some(last) = curve.last() else {
        return 0;
    };
    for p in curve {
        if p.epoch + window > last.epoch {
            break;
        }
        let stable = curve
            .iter()
            .filter(|c| c.epoch >= p.epoch && c.epoch <= p.epoch + window)
            .all(|c| (c.performance - last.performance).abs() <= tol);
        if stable {
            return p.epoch;
        }
    }
    last.epoch
}

struct Annotator<'a> {
    source: PriorSource<'a>,
    cache: Option<SemanticCache>,
    priors: BTreeMap<StateId, PriorDistribution>,
    steps: u64,
}

impl<'a> Annotator<'a> {
    fn new(source: PriorSource<'a>) -> Self {
        let cache = match &source {
            PriorSource::Cached { params, .. } => Some(SemanticCache::new(*params)),
            _ => None,
        };
        Self {
            source,
            cache,
            priors: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Assigns priors to the batch states; returns per-transition hit flags.
    fn annotate(&mut self, batch: &[Transition]) -> Result<Vec<bool>> {
        let mut hits = Vec::with_capacity(batch.len());
        for t in batch {
            self.steps += 1;
            match &mut self.source {
                PriorSource::None => hits.push(false),
                PriorSource::Uncached { provider } => {
                    if let Entry::Vacant(slot) = self.priors.entry(t.state) {
                        slot.insert(provider.query(t.state)?);
                    }
                    hits.push(false);
                }
                PriorSource::Cached {
                    provider, embedder, ..
                } => {
                    let key = embedder.embed(t.state)?;
                    let cache = self.cache.as_mut().expect("cached source has a cache");
                    let got = fetch_prior(t.state, &key, Some(cache), &mut **provider, self.steps)?;
                    self.priors.entry(t.state).or_insert(got.prior);
                    hits.push(got.hit);
                }
            }
        }
        Ok(hits)
    }

    fn adapt(&mut self, metrics: &BatchMetrics) {
        if let (PriorSource::Cached { meta: Some(cfg), .. }, Some(cache)) =
            (&self.source, self.cache.as_mut())
        {
            let next = meta::update(cache.params(), metrics, cfg);
            cache.set_params(next);
        }
    }

    fn queries(&self) -> u64 {
        match &self.source {
            PriorSource::None => 0,
            PriorSource::Uncached { provider } => provider.stats().query_count,
            PriorSource::Cached { provider, .. } => provider.stats().query_count,
        }
    }
}

/// Trains on `dataset` and evaluates the greedy policy every
/// `cfg.eval_every` epochs through `evaluate`, which returns normalized
/// performance.
///
/// Priors are acquired during the first pass; epoch 0 is evaluated before
/// any update.
pub fn train_offline(
    dataset: &OfflineDataset,
    n_actions: usize,
    cfg: &CQLConfig,
    source: PriorSource<'_>,
    evaluate: &mut dyn FnMut(&QTable) -> Result<f64>,
    seed: u64,
) -> Result<OfflineResult> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if dataset.transitions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let kind = source.kind();
    let use_prior = kind != PriorSourceKind::None;
    let eff = CQLConfig {
        beta: if use_prior { cfg.beta } else { 0.0 },
        ..*cfg
    };
    let behavior = behavior_policy(&dataset.transitions, n_actions, 1.0);
    let distinct: HashSet<StateId> = dataset.transitions.iter().map(|t| t.state).collect();
    let queries_before = match &source {
        PriorSource::None => 0,
        PriorSource::Uncached { provider } => provider.stats().query_count,
        PriorSource::Cached { provider, .. } => provider.stats().query_count,
    };
    let mut annotator = Annotator::new(source);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.transitions.len()).collect();
    let mut q = QTable::new(n_actions, cfg.gamma, cfg.lr);
    let mut curve = vec![EvalPoint {
        epoch: 0,
        performance: evaluate(&q)?,
    }];

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let target = q.clone();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Transition> =
                chunk.iter().map(|i| dataset.transitions[*i].clone()).collect();
            if epoch == 1 {
                let hits = annotator.annotate(&batch)?;
                if kind == PriorSourceKind::AdaptiveCache {
                    annotator.adapt(&offline_metrics(&q, &target, &batch, &hits)?);
                }
            }
            let priors = use_prior.then_some(&annotator.priors);
            let (_, grad) = cql_prior_loss(&q, &target, &batch, &behavior, priors, &eff)?;
            for (s, g) in grad {
                let row = q.row_mut(s);
                row.iter_mut().zip(&g).for_each(|(v, g)| *v -= cfg.lr * g);
            }
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            curve.push(EvalPoint {
                epoch,
                performance: evaluate(&q)?,
            });
        }
    }

    let queries = annotator.queries() - queries_before;
    let final_performance = curve.last().map_or(0.0, |p| p.performance);
    Ok(OfflineResult {
        epochs_to_converge: epochs_to_converge(&curve, cfg.window, cfg.tolerance),
        final_performance,
        curve,
        q,
        queries,
        distinct_states: distinct.len(),
        query_ratio: use_prior.then(|| queries as f64 / distinct.len() as f64),
        final_params: annotator.cache.as_ref().map(|c| *c.params()),
    })
}

fn offline_metrics(
    q: &QTable,
    target: &QTable,
    batch: &[Transition],
    hits: &[bool],
) -> Result<BatchMetrics> {
    let records: Vec<crate::rl::StepRecord> = batch
        .iter()
        .zip(hits)
        .map(|(t, hit)| {
            let bootstrap = if t.done {
                0.0
            } else {
                target.gamma * target.max_value(t.next_state)
            };
            let q_sa = q.get(t.state, t.action.symbolic);
            crate::rl::StepRecord {
                td_error: t.reward + bootstrap - q_sa,
                hit: *hit,
                q_value: q_sa,
            }
        })
        .collect();
    crate::rl::batch_metrics(&records)
}
