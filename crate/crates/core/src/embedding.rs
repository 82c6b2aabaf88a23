//! Deterministic state embeddings for cache keys.
//!
//! Text is tokenized, expanded into unigrams and bigrams and feature-hashed
//! into `dim` buckets with a signed hash. Numeric states are bucketized per
//! coordinate and the bucket indicators (no cross-coordinate n-grams) go
//! through the same hasher. Every embedding is L2-normalized; a state whose
//! hashed features cancel out maps to the first basis vector.

use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::env::{StateId, Task};
use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_BUCKETS: usize = 8;

/// A unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `raw`. Zero (or empty-norm) vectors become `e_1`.
    pub fn normalized(mut raw: Vec<f64>) -> Self {
        assert!(!raw.is_empty(), "embedding dimension must be positive");
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            raw.iter_mut().for_each(|x| *x /= norm);
        } else {
            raw.iter_mut().for_each(|x| *x = 0.0);
            raw[0] = 1.0;
        }
        Self(raw)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        cosine_similarity(self, other)
    }
}

/// Cosine similarity of two unit vectors, i.e. their dot product.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum()
}

/// Lowercases and splits on whitespace, trimming punctuation at token edges.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Unigrams followed by space-joined bigrams.
pub fn ngrams(tokens: &[String]) -> Vec<String> {
    let mut out: Vec<String> = tokens.to_vec();
    out.extend(tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    out
}

/// Signed feature hasher shared by the text and numeric embedders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHasher {
    dim: usize,
    seed: u64,
}

impl FeatureHasher {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Bucket index and sign for one feature string.
    pub fn slot(&self, feature: &str) -> (usize, f64) {
        let mut h = FnvHasher::default();
        h.write(&self.seed.to_le_bytes());
        h.write(feature.as_bytes());
        let v = h.finish();
        let sign = if v >> 63 == 1 { -1.0 } else { 1.0 };
        ((v % self.dim as u64) as usize, sign)
    }

    pub fn hash_features<S: AsRef<str>>(&self, features: &[S]) -> Embedding {
        let mut raw = vec![0.0; self.dim];
        for f in features {
            let (i, s) = self.slot(f.as_ref());
            raw[i] += s;
        }
        Embedding::normalized(raw)
    }

    pub fn embed_text(&self, description: &str) -> Result<Embedding> {
        let tokens = tokenize(description);
        if tokens.is_empty() {
            return Err(Error::EmptyDescription);
        }
        Ok(self.hash_features(&ngrams(&tokens)))
    }
}

/// Bucketizes numeric states before hashing.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericEmbedder {
    hasher: FeatureHasher,
    bounds: Vec<(f64, f64)>,
    buckets: usize,
}

impl NumericEmbedder {
    pub fn new(hasher: FeatureHasher, bounds: Vec<(f64, f64)>, buckets: usize) -> Self {
        assert!(buckets > 0, "need at least one bucket");
        assert!(
            bounds.iter().all(|(lo, hi)| hi > lo),
            "bounds must have positive width"
        );
        Self {
            hasher,
            bounds,
            buckets,
        }
    }

    pub fn bucket(&self, coord: usize, x: f64) -> usize {
        let (lo, hi) = self.bounds[coord];
        let b = ((x - lo) / (hi - lo) * self.buckets as f64).floor();
        b.clamp(0.0, (self.buckets - 1) as f64) as usize
    }

    /// Bucket-indicator tokens, one per coordinate.
    pub fn tokens(&self, state: &[f64]) -> Result<Vec<String>> {
        if state.is_empty() {
            return Err(Error::EmptyState);
        }
        if state.len() != self.bounds.len() {
            return Err(Error::DimensionMismatch {
                expected: self.bounds.len(),
                got: state.len(),
            });
        }
        if let Some(i) = state.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(state
            .iter()
            .enumerate()
            .map(|(i, x)| format!("x{i}:b{}", self.bucket(i, *x)))
            .collect())
    }

    pub fn embed(&self, state: &[f64]) -> Result<Embedding> {
        let tokens = self.tokens(state)?;
        Ok(self.hasher.hash_features(&tokens))
    }
}

/// Which view of a state feeds the cache key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    Text,
    Numeric,
}

impl std::str::FromStr for EmbeddingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(Self::Text),
            "numeric" => Ok(Self::Numeric),
            other => Err(format!("unknown embedding mode `{other}`")),
        }
    }
}

/// Maps a task's state ids to cache keys.
#[derive(Clone)]
pub struct StateEmbedder {
    task: Arc<dyn Task>,
    mode: EmbeddingMode,
    hasher: FeatureHasher,
    numeric: NumericEmbedder,
}

impl StateEmbedder {
    pub fn new(task: Arc<dyn Task>, mode: EmbeddingMode, hasher: FeatureHasher, buckets: usize) -> Self {
        let numeric = NumericEmbedder::new(hasher, task.feature_bounds(), buckets);
        Self {
            task,
            mode,
            hasher,
            numeric,
        }
    }

    pub fn mode(&self) -> EmbeddingMode {
        self.mode
    }

    pub fn embed(&self, state: StateId) -> Result<Embedding> {
        match self.mode {
            EmbeddingMode::Text => self.hasher.embed_text(&self.task.describe(state)?),
            EmbeddingMode::Numeric => self.numeric.embed(&self.task.features(state)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_is_deterministic() {
        let h = FeatureHasher::new(DEFAULT_DIM, 0);
        let a = h.embed_text("go north to the door").unwrap();
        let b = h.embed_text("go north to the door").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_text_is_rejected() {
        let h = FeatureHasher::new(DEFAULT_DIM, 0);
        assert!(matches!(h.embed_text("  "), Err(Error::EmptyDescription)));
        assert!(matches!(h.embed_text(""), Err(Error::EmptyDescription)));
    }

    #[test]
    fn repeated_token_is_collinear() {
        let h = FeatureHasher::new(DEFAULT_DIM, 0);
        let one = h.hash_features(&["a"]);
        let two = h.hash_features(&["a", "a"]);
        assert!((one.cosine(&two) - 1.0).abs() < 1e-12);

        // "a a" also carries the bigram "a a"; it only stays collinear when
        // the bigram lands in the unigram's slot.
        let sim = h.embed_text("a").unwrap().cosine(&h.embed_text("a a").unwrap());
        let (ui, _) = h.slot("a");
        let (bi, _) = h.slot("a a");
        let expected = if ui == bi { 1.0 } else { 2.0 / 5f64.sqrt() };
        assert!((sim - expected).abs() < 1e-12, "{sim} vs {expected}");
    }

    #[test]
    fn zero_features_map_to_e1() {
        let e = Embedding::normalized(vec![0.0; 4]);
        assert_eq!(e.values(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_identity_orthogonal_antipodal() {
        let v = Embedding::normalized(vec![0.6, 0.8, 0.0]);
        let w = Embedding::normalized(vec![-0.6, -0.8, 0.0]);
        let o = Embedding::normalized(vec![0.0, 0.0, 1.0]);
        assert!((cosine_similarity(&v, &v) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&v, &o), 0.0);
        assert!((cosine_similarity(&v, &w) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn numeric_rejects_bad_input() {
        let e = NumericEmbedder::new(FeatureHasher::new(16, 0), vec![(0.0, 1.0)], 8);
        assert!(matches!(e.embed(&[]), Err(Error::EmptyState)));
        assert!(matches!(e.embed(&[f64::NAN]), Err(Error::NonFinite(0))));
        assert!(matches!(
            e.embed(&[0.1, 0.2]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn numeric_same_bucket_is_identical() {
        let e = NumericEmbedder::new(
            FeatureHasher::new(DEFAULT_DIM, 0),
            vec![(0.0, 1.0), (0.0, 1.0)],
            8,
        );
        let a = e.embed(&[0.51, 0.02]).unwrap();
        let b = e.embed(&[0.55, 0.1]).unwrap();
        assert!((a.cosine(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bucket_clamps_edges() {
        let e = NumericEmbedder::new(FeatureHasher::new(8, 0), vec![(0.0, 1.0)], 8);
        assert_eq!(e.bucket(0, 1.0), 7);
        assert_eq!(e.bucket(0, -3.0), 0);
        assert_eq!(e.bucket(0, 0.125), 1);
    }
}
