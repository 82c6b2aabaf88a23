//! Builds environments, embedders and providers from an [`ExperimentConfig`].

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{EnvKind, ExperimentConfig, ProviderKind};
use crate::embedding::{FeatureHasher, StateEmbedder};
use crate::env::{Environment, PointReach, StateId, Task, TextGrid};
use crate::error::{Error, Result};
use crate::provider::{
    adapt_prior, AdaptationReport, AdaptationSet, MockProvider, PriorProvider, RemoteProvider,
};

pub fn build_env(cfg: &ExperimentConfig) -> Result<Box<dyn Environment>> {
    Ok(match cfg.env {
        EnvKind::TextGrid => Box::new(TextGrid::new(cfg.textgrid)?),
        EnvKind::PointReach => Box::new(PointReach::new(cfg.pointreach)?),
    })
}

pub fn build_embedder(cfg: &ExperimentConfig, task: Arc<dyn Task>) -> StateEmbedder {
    let e = &cfg.embedding;
    StateEmbedder::new(task, e.mode, FeatureHasher::new(e.dim, e.seed), e.buckets)
}

pub fn build_mock(cfg: &ExperimentConfig, task: Arc<dyn Task>) -> Result<MockProvider> {
    MockProvider::new(task, cfg.provider.sharpness, cfg.provider.latency)
}

/// Collects up to `shots` expert `(state, action)` pairs from seeded rollouts.
///
/// States where the provider's argmax disagrees with the expert come first;
/// the remainder is filled in trajectory order.
pub fn select_demos(
    env: &mut dyn Environment,
    provider: &MockProvider,
    shots: usize,
    seed: u64,
) -> Result<Vec<(StateId, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = Vec::new();
    for _ in 0..8 {
        env.reset(&mut rng);
        for _ in 0..env.max_steps() {
            let s = env.state();
            let a = env.expert_action();
            if !seen.iter().any(|(t, _)| *t == s) {
                seen.push((s, a.symbolic));
            }
            if env.step(&a)?.finished() {
                break;
            }
        }
    }
    let mut out: Vec<(StateId, usize)> = Vec::with_capacity(shots);
    for &(s, a) in &seen {
        if out.len() < shots && provider.peek(s)?.argmax() != a {
            out.push((s, a));
        }
    }
    for &(s, a) in &seen {
        if out.len() < shots && !out.iter().any(|(t, _)| *t == s) {
            out.push((s, a));
        }
    }
    Ok(out)
}

/// Applies few-shot adaptation to `provider` when the config enables it.
pub fn maybe_adapt(
    cfg: &ExperimentConfig,
    provider: &mut MockProvider,
) -> Result<Option<AdaptationReport>> {
    let fs = &cfg.provider.fewshot;
    if !fs.enabled {
        return Ok(None);
    }
    let mut env = build_env(cfg)?;
    let demos = select_demos(env.as_mut(), provider, fs.shots, fs.seed)?;
    let set = AdaptationSet::new(demos, fs.lambda_ent)?;
    adapt_prior(provider, &set, fs.steps, fs.lr).map(Some)
}

/// The configured provider, adapted when few-shot adaptation is enabled.
pub fn build_provider(
    cfg: &ExperimentConfig,
    task: Arc<dyn Task>,
) -> Result<Box<dyn PriorProvider>> {
    match cfg.provider.kind {
        ProviderKind::Mock => {
            let mut mock = build_mock(cfg, task)?;
            maybe_adapt(cfg, &mut mock)?;
            Ok(Box::new(mock))
        }
        ProviderKind::Remote => {
            let url = cfg
                .provider
                .remote_url
                .as_deref()
                .ok_or_else(|| Error::Config(vec!["provider.remote.url is empty".into()]))?;
            Ok(Box::new(RemoteProvider::new(
                task,
                url,
                cfg.provider.timeout,
                cfg.provider.fallback,
            )?))
        }
    }
}

/// The adapted mock provider; errors when the config selects a remote one.
pub fn build_adapted_mock(cfg: &ExperimentConfig, task: Arc<dyn Task>) -> Result<MockProvider> {
    if cfg.provider.kind != ProviderKind::Mock {
        return Err(Error::NotAdaptable);
    }
    let mut mock = build_mock(cfg, task)?;
    maybe_adapt(cfg, &mut mock)?;
    Ok(mock)
}
