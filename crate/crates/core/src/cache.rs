//! Semantic cache of action priors keyed by state embeddings.
//!
//! Lookups scan every entry and return the most similar one when its cosine
//! similarity is strictly above the threshold `δ`. Capacity is the rounded
//! value of the real-valued `K` the meta-optimizer adjusts; overflow evicts
//! the least recently accessed entry. A refresh step re-queries the provider
//! for the stale entry that carries the most visitation-weighted age.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::PriorDistribution;
use crate::embedding::Embedding;
use crate::env::StateId;
use crate::error::{Error, Result};
use crate::provider::PriorProvider;

/// Live cache parameters `(K, δ, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheParams {
    /// Capacity `K`; stored as a real so gradient steps accumulate.
    pub capacity: f64,
    /// Similarity threshold `δ`.
    pub threshold: f64,
    /// Per-step refresh probability `r`.
    pub refresh_rate: f64,
}

impl Default for CacheParams {
    fn default() -> Self {
        Self {
            capacity: 500.0,
            threshold: 0.8,
            refresh_rate: 0.1,
        }
    }
}

impl CacheParams {
    pub fn effective_capacity(&self) -> usize {
        self.capacity.round().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub key: Embedding,
    pub prior: PriorDistribution,
    pub last_access: u64,
    pub inserted_at: u64,
    pub hits: u64,
    pub source_state_id: StateId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lookup {
    Hit {
        prior: PriorDistribution,
        similarity: f64,
        source: StateId,
    },
    Miss {
        /// Best similarity seen, if the cache was non-empty.
        best_similarity: Option<f64>,
    },
}

impl Lookup {
    pub fn is_hit(&self) -> bool {
        matches!(self, Lookup::Hit { .. })
    }

    pub fn similarity(&self) -> Option<f64> {
        match self {
            Lookup::Hit { similarity, .. } => Some(*similarity),
            Lookup::Miss { best_similarity } => *best_similarity,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemanticCache {
    entries: Vec<CacheEntry>,
    params: CacheParams,
    hits: u64,
    misses: u64,
}

impl SemanticCache {
    pub fn new(params: CacheParams) -> Self {
        Self {
            entries: Vec::new(),
            params,
            hits: 0,
            misses: 0,
        }
    }

    pub fn params(&self) -> &CacheParams {
        &self.params
    }

    /// Replaces the parameters and evicts until the new capacity is met.
    pub fn set_params(&mut self, params: CacheParams) -> Vec<CacheEntry> {
        self.params = params;
        let mut evicted = Vec::new();
        while self.entries.len() > self.params.effective_capacity() {
            evicted.push(self.evict_lru());
        }
        evicted
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn lookups(&self) -> u64 {
        self.hits + self.misses
    }

    /// Cumulative hit rate; 0 before the first lookup.
    pub fn hit_rate(&self) -> f64 {
        match self.lookups() {
            0 => 0.0,
            n => self.hits as f64 / n as f64,
        }
    }

    /// Index and similarity of the most similar entry. Ties go to the most
    /// recently inserted entry.
    pub fn best_match(&self, query: &Embedding) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let sim = e.key.cosine(query);
            let better = match best {
                None => true,
                Some((j, s)) => {
                    sim > s || (sim == s && e.inserted_at >= self.entries[j].inserted_at)
                }
            };
            if better {
                best = Some((i, sim));
            }
        }
        best
    }

    /// The entry a lookup would return, without touching any counters.
    pub fn peek(&self, query: &Embedding) -> Option<(&CacheEntry, f64)> {
        self.best_match(query)
            .filter(|(_, sim)| *sim > self.params.threshold)
            .map(|(i, sim)| (&self.entries[i], sim))
    }

    pub fn lookup(&mut self, query: &Embedding, now: u64) -> Lookup {
        match self.best_match(query) {
            Some((i, sim)) if sim > self.params.threshold => {
                self.hits += 1;
                let e = &mut self.entries[i];
                e.hits += 1;
                e.last_access = e.last_access.max(now);
                Lookup::Hit {
                    prior: e.prior.clone(),
                    similarity: sim,
                    source: e.source_state_id,
                }
            }
            best => {
                self.misses += 1;
                Lookup::Miss {
                    best_similarity: best.map(|(_, s)| s),
                }
            }
        }
    }

    /// Appends an entry and, if over capacity, evicts and returns the least
    /// recently used one.
    pub fn insert(
        &mut self,
        key: Embedding,
        prior: PriorDistribution,
        source: StateId,
        now: u64,
    ) -> Result<Option<CacheEntry>> {
        if let Some(first) = self.entries.first() {
            if first.key.dim() != key.dim() {
                return Err(Error::DimensionMismatch {
                    expected: first.key.dim(),
                    got: key.dim(),
                });
            }
            if first.prior.len() != prior.len() {
                return Err(Error::InvalidPrior(format!(
                    "prior over {} actions, cache holds {}",
                    prior.len(),
                    first.prior.len()
                )));
            }
        }
        self.entries.push(CacheEntry {
            key,
            prior,
            last_access: now,
            inserted_at: now,
            hits: 0,
            source_state_id: source,
        });
        if self.entries.len() > self.params.effective_capacity() {
            return Ok(Some(self.evict_lru()));
        }
        Ok(None)
    }

    /// Index of the LRU victim: smallest `last_access`, then smallest
    /// `inserted_at`, then lowest position.
    pub fn lru_index(&self) -> Option<usize> {
        self.entries
            .iter()
            .enumerate()
            .min_by_key(|(i, e)| (e.last_access, e.inserted_at, *i))
            .map(|(i, _)| i)
    }

    fn evict_lru(&mut self) -> CacheEntry {
        let i = self.lru_index().expect("evicting from an empty cache");
        self.entries.remove(i)
    }

    /// Entry maximizing `μ(source) × (now − inserted_at)`. Ties go to the
    /// oldest insertion. States absent from `visitation` have density 0.
    pub fn refresh_candidate(&self, visitation: &HashMap<StateId, f64>, now: u64) -> Option<usize> {
        let score = |e: &CacheEntry| {
            let mu = visitation.get(&e.source_state_id).copied().unwrap_or(0.0);
            mu * now.saturating_sub(e.inserted_at) as f64
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let s = score(e);
            let better = match best {
                None => true,
                Some((j, bs)) => s > bs || (s == bs && e.inserted_at < self.entries[j].inserted_at),
            };
            if better {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Re-queries the provider for entry `index` and stores the fresh prior.
    pub fn refresh_entry(
        &mut self,
        index: usize,
        provider: &mut dyn PriorProvider,
        now: u64,
    ) -> Result<()> {
        let source = self.entries[index].source_state_id;
        let prior = provider.query(source)?;
        let e = &mut self.entries[index];
        e.prior = prior;
        e.inserted_at = now;
        e.last_access = e.last_access.max(now);
        Ok(())
    }

    /// One Bernoulli(`r`) draw; on success refreshes the best candidate.
    /// Returns the number of refreshed entries (0 or 1).
    pub fn refresh_step<R: Rng + ?Sized>(
        &mut self,
        visitation: &HashMap<StateId, f64>,
        provider: &mut dyn PriorProvider,
        rng: &mut R,
        now: u64,
    ) -> Result<usize> {
        let draw: f64 = rng.gen();
        if draw >= self.params.refresh_rate {
            return Ok(0);
        }
        match self.refresh_candidate(visitation, now) {
            Some(i) => {
                self.refresh_entry(i, provider, now)?;
                Ok(1)
            }
            None => Ok(0),
        }
    }

    /// One JSON object per entry; priors are keyed by action name.
    pub fn export_jsonl<W: Write>(&self, mut w: W, action_names: &[&str]) -> Result<()> {
        for e in &self.entries {
            let rec = EntryRecord {
                key: e.key.values().to_vec(),
                prior: e
                    .prior
                    .probs()
                    .iter()
                    .enumerate()
                    .map(|(a, p)| (action_name(action_names, a), *p))
                    .collect(),
                last_access: e.last_access,
                inserted_at: e.inserted_at,
                hits: e.hits,
                source_state_id: e.source_state_id,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Rebuilds a cache from [`SemanticCache::export_jsonl`] output. Counters
    /// start at zero.
    pub fn import_jsonl<R: BufRead>(
        r: R,
        action_names: &[&str],
        params: CacheParams,
    ) -> Result<Self> {
        let mut cache = Self::new(params);
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EntryRecord = serde_json::from_str(&line)?;
            let mut probs = vec![0.0; action_names.len()];
            for (name, p) in rec.prior {
                let a = action_names
                    .iter()
                    .position(|n| *n == name)
                    .ok_or(Error::UnknownAction(name))?;
                probs[a] = p;
            }
            if rec.last_access < rec.inserted_at {
                return Err(Error::OutOfRange(format!(
                    "entry for {} accessed before insertion",
                    rec.source_state_id
                )));
            }
            cache.entries.push(CacheEntry {
                key: Embedding::normalized(rec.key),
                prior: PriorDistribution::new(probs)?,
                last_access: rec.last_access,
                inserted_at: rec.inserted_at,
                hits: rec.hits,
                source_state_id: rec.source_state_id,
            });
        }
        cache.set_params(params);
        Ok(cache)
    }
}

fn action_name(names: &[&str], a: usize) -> String {
    names.get(a).map_or_else(|| a.to_string(), |n| n.to_string())
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    key: Vec<f64>,
    prior: BTreeMap<String, f64>,
    last_access: u64,
    inserted_at: u64,
    hits: u64,
    source_state_id: StateId,
}
