use priorcache::embedding::{
    cosine_similarity, Embedding, EmbeddingMode, FeatureHasher, NumericEmbedder, StateEmbedder, DEFAULT_DIM,
};
use priorcache::env::{Task, TextGridConfig, TextGridTask};
use proptest::prelude::*;
use std::sync::Arc;

/// Straightforward re-implementation: FNV-1a over seed bytes then feature
/// bytes, index from the low bits, sign from the top bit.
fn reference_vector(features: &[String], dim: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for f in features {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in seed.to_le_bytes().iter().chain(f.as_bytes()) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
        return v;
    }
    v.iter().map(|x| x / norm).collect()
}

fn reference_text(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    let mut feats = tokens.clone();
    for w in tokens.windows(2) {
        feats.push(format!("{} {}", w[0], w[1]));
    }
    reference_vector(&feats, dim, seed)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn text_similarity_matches_reference_hasher() {
    let h = FeatureHasher::new(DEFAULT_DIM, 0);
    let a = h.embed_text("go north").unwrap();
    let b = h.embed_text("open door").unwrap();
    let expected = dot(&reference_text("go north", 64, 0), &reference_text("open door", 64, 0));
    assert!((a.cosine(&b) - expected).abs() < 1e-12);
    assert_eq!(a.values(), reference_text("go north", 64, 0).as_slice());
}

#[test]
fn text_embedding_matches_reference_for_other_seeds() {
    for seed in [1, 7, 12345] {
        let h = FeatureHasher::new(32, seed);
        let text = "You are at (2, 3). You do not hold the key.";
        assert_eq!(h.embed_text(text).unwrap().values(), reference_text(text, 32, seed).as_slice());
    }
}

#[test]
fn numeric_neighbors_one_bucket_apart_are_below_one() {
    let e = NumericEmbedder::new(FeatureHasher::new(DEFAULT_DIM, 0), vec![(0.0, 1.0), (0.0, 1.0)], 8);
    let a = e.embed(&[0.55, 0.30]).unwrap();
    let b = e.embed(&[0.70, 0.30]).unwrap();
    let ra = reference_vector(&["x0:b4".into(), "x1:b2".into()], 64, 0);
    let rb = reference_vector(&["x0:b5".into(), "x1:b2".into()], 64, 0);
    let expected = dot(&ra, &rb);
    assert!((a.cosine(&b) - expected).abs() < 1e-12);
    assert!(a.cosine(&b) < 1.0);
}

#[test]
fn hashing_adds_no_collisions_beyond_bucketing() {
    let task = Arc::new(TextGridTask::new(TextGridConfig::default()).unwrap());
    let bounds = vec![(0.0, 1.0), (-4.0, 4.0), (-4.0, 4.0)];
    let tok = NumericEmbedder::new(FeatureHasher::new(DEFAULT_DIM, 0), bounds, 8);
    let emb = StateEmbedder::new(task.clone(), EmbeddingMode::Numeric, FeatureHasher::new(DEFAULT_DIM, 0), 8);
    let states: Vec<_> = task.states().collect();
    for (i, a) in states.iter().enumerate() {
        for b in &states[i + 1..] {
            let ta = tok.tokens(&task.features(*a).unwrap()).unwrap();
            let tb = tok.tokens(&task.features(*b).unwrap()).unwrap();
            let sim = emb.embed(*a).unwrap().cosine(&emb.embed(*b).unwrap());
            if ta == tb {
                assert!((sim - 1.0).abs() < 1e-12);
            } else {
                assert!(sim < 1.0 - 1e-9, "{a:?} and {b:?} collide");
            }
        }
    }
}

#[test]
fn nine_buckets_separate_every_textgrid_state() {
    let task = Arc::new(TextGridTask::new(TextGridConfig::default()).unwrap());
    let emb = StateEmbedder::new(task.clone(), EmbeddingMode::Numeric, FeatureHasher::new(DEFAULT_DIM, 0), 9);
    let states: Vec<_> = task.states().collect();
    for (i, a) in states.iter().enumerate() {
        for b in &states[i + 1..] {
            if task.features(*a).unwrap() == task.features(*b).unwrap() {
                continue;
            }
            let sim = emb.embed(*a).unwrap().cosine(&emb.embed(*b).unwrap());
            assert!(sim < 1.0 - 1e-9, "{a:?} and {b:?} collide");
        }
    }
}

#[test]
fn zero_norm_maps_to_first_basis_vector() {
    let e = Embedding::normalized(vec![0.0; 4]);
    assert_eq!(e.values(), &[1.0, 0.0, 0.0, 0.0]);
}

proptest! {
    #[test]
    fn cosine_is_symmetric_and_bounded(a in "[a-z ]{1,40}", b in "[a-z ]{1,40}") {
        prop_assume!(!a.trim().is_empty() && !b.trim().is_empty());
        let h = FeatureHasher::new(DEFAULT_DIM, 3);
        let ea = h.embed_text(&a).unwrap();
        let eb = h.embed_text(&b).unwrap();
        prop_assert_eq!(cosine_similarity(&ea, &eb), cosine_similarity(&eb, &ea));
        let s = ea.cosine(&eb);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s));
        let norm: f64 = ea.values().iter().map(|x| x * x).sum();
        prop_assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn embeddings_are_reproducible(x in 0.0f64..1.0, y in 0.0f64..1.0, seed in 0u64..1000) {
        let mk = || NumericEmbedder::new(FeatureHasher::new(DEFAULT_DIM, seed), vec![(0.0, 1.0); 2], 8);
        let a = mk().embed(&[x, y]).unwrap();
        let b = mk().embed(&[x, y]).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }
}
