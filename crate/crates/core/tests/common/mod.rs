//! Shared test oracles.
#![allow(dead_code)]

use priorcache::cache::{CacheParams, Lookup, SemanticCache};
use priorcache::distribution::PriorDistribution;
use priorcache::embedding::Embedding;
use priorcache::env::StateId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force cache kept as a plain list in insertion order.
pub struct Reference {
    pub entries: Vec<RefEntry>,
    pub capacity: usize,
    pub threshold: f64,
    pub hits: u64,
    pub misses: u64,
}

pub struct RefEntry {
    key: Vec<f64>,
    source: u64,
    last_access: u64,
    inserted_at: u64,
}

impl Reference {
    pub fn lookup(&mut self, key: &[f64], now: u64) -> Option<u64> {
        let mut best: Option<(f64, u64, usize)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let sim: f64 = e.key.iter().zip(key).map(|(a, b)| a * b).sum();
            let cand = (sim, e.inserted_at, i);
            if best.is_none_or(|b| cand.partial_cmp(&b) == Some(std::cmp::Ordering::Greater)) {
                best = Some(cand);
            }
        }
        match best {
            Some((sim, _, i)) if sim > self.threshold => {
                self.hits += 1;
                let e = &mut self.entries[i];
                e.last_access = e.last_access.max(now);
                Some(e.source)
            }
            _ => {
                self.misses += 1;
                None
            }
        }
    }

    pub fn evict_to_capacity(&mut self) -> Vec<u64> {
        let mut out = Vec::new();
        while self.entries.len() > self.capacity {
            let i = (0..self.entries.len())
                .min_by_key(|&i| (self.entries[i].last_access, self.entries[i].inserted_at, i))
                .unwrap();
            out.push(self.entries.remove(i).source);
        }
        out
    }

    pub fn insert(&mut self, key: Vec<f64>, source: u64, now: u64) -> Vec<u64> {
        self.entries.push(RefEntry {
            key,
            source,
            last_access: now,
            inserted_at: now,
        });
        self.evict_to_capacity()
    }
}

pub fn key_pool(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    // Small integer components make exact ties and exact duplicates likely.
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-2i32..=2) as f64).collect();
            Embedding::normalized(raw).values().to_vec()
        })
        .collect()
}

#[derive(Debug, Default, PartialEq)]
pub struct Trace {
    pub lookups: Vec<Option<u64>>,
    pub evictions: Vec<u64>,
}

pub fn replay(seed: u64, ops: usize, threshold: f64) -> (Trace, Trace, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = key_pool(&mut rng, 24);
    let mut params = CacheParams {
        capacity: 8.0,
        threshold,
        refresh_rate: 0.0,
    };
    let mut cache = SemanticCache::new(params);
    let mut reference = Reference {
        entries: Vec::new(),
        capacity: 8,
        threshold,
        hits: 0,
        misses: 0,
    };
    let mut got = Trace::default();
    let mut want = Trace::default();
    let prior = PriorDistribution::uniform(3);
    for now in 0..ops as u64 {
        if rng.gen::<f64>() < 0.05 {
            params.capacity = rng.gen_range(2.0..12.0);
            reference.capacity = params.capacity.round() as usize;
            got.evictions.extend(cache.set_params(params).iter().map(|e| e.source_state_id.0));
            want.evictions.extend(reference.evict_to_capacity());
            continue;
        }
        let k = rng.gen_range(0..pool.len());
        let key = Embedding::normalized(pool[k].clone());
        let source = now;
        match cache.lookup(&key, now) {
            Lookup::Hit { source, .. } => got.lookups.push(Some(source.0)),
            Lookup::Miss { .. } => {
                got.lookups.push(None);
                if let Some(e) = cache.insert(key.clone(), prior.clone(), StateId(source), now).unwrap() {
                    got.evictions.push(e.source_state_id.0);
                }
            }
        }
        let r = reference.lookup(key.values(), now);
        want.lookups.push(r);
        if r.is_none() {
            want.evictions.extend(reference.insert(key.values().to_vec(), source, now));
        }
        assert!(cache.len() <= params.effective_capacity());
        assert_eq!(cache.hits() + cache.misses(), cache.lookups());
        assert_eq!((cache.hits(), cache.misses()), (reference.hits, reference.misses));
    }
    (got, want, cache.hits())
}


/// Hit counts of one 10³-lookup workload replayed at each threshold, with
/// room for every key so nothing is evicted.
pub fn threshold_hits(seed: u64, deltas: &[f64]) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = key_pool(&mut rng, 24);
    let workload: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..pool.len())).collect();
    deltas
        .iter()
        .map(|&threshold| {
            let mut c = SemanticCache::new(CacheParams {
                capacity: 1000.0,
                threshold,
                refresh_rate: 0.0,
            });
            for (now, k) in workload.iter().enumerate() {
                let key = Embedding::normalized(pool[*k].clone());
                if !c.lookup(&key, now as u64).is_hit() {
                    c.insert(key, PriorDistribution::uniform(2), StateId(*k as u64), now as u64)
                        .unwrap();
                }
            }
            c.hits()
        })
        .collect()
}
