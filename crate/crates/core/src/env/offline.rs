//! Offline datasets collected with random, medium and expert behavior.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Environment;
use crate::error::{Error, Result};
use crate::rl::Transition;

/// Mixing probability of random actions in the medium policy.
pub const MEDIUM_EPSILON: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorPolicy {
    Random,
    Medium,
    Expert,
}

impl std::str::FromStr for BehaviorPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "medium" => Ok(Self::Medium),
            "expert" => Ok(Self::Expert),
            other => Err(format!("unknown behavior policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    pub behavior: BehaviorPolicy,
    pub transitions: Vec<Transition>,
    /// Success flag per collected episode.
    pub episode_success: Vec<bool>,
}

impl OfflineDataset {
    pub fn success_rate(&self) -> f64 {
        if self.episode_success.is_empty() {
            return 0.0;
        }
        self.episode_success.iter().filter(|s| **s).count() as f64
            / self.episode_success.len() as f64
    }

    /// One JSON transition per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.transitions {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, behavior: BehaviorPolicy) -> Result<Self> {
        let mut transitions = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            transitions.push(serde_json::from_str(&line)?);
        }
        if transitions.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Self {
            behavior,
            transitions,
            episode_success: Vec::new(),
        })
    }
}

/// Rolls out `episodes` episodes of the given behavior policy.
pub fn generate_offline(
    env: &mut dyn Environment,
    behavior: BehaviorPolicy,
    episodes: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if episodes == 0 {
        return Err(Error::OutOfRange("episodes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::new();
    let mut episode_success = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset(&mut rng);
        loop {
            let action = match behavior {
                BehaviorPolicy::Expert => env.expert_action(),
                BehaviorPolicy::Random => env.random_action(&mut rng),
                BehaviorPolicy::Medium => {
                    if rng.gen::<f64>() < MEDIUM_EPSILON {
                        env.random_action(&mut rng)
                    } else {
                        env.expert_action()
                    }
                }
            };
            let out = env.step(&action)?;
            transitions.push(Transition {
                state,
                action,
                reward: out.reward,
                next_state: out.next,
                done: out.done,
            });
            state = out.next;
            if out.finished() {
                break;
            }
        }
        episode_success.push(env.succeeded());
    }
    Ok(OfflineDataset {
        behavior,
        transitions,
        episode_success,
    })
}
