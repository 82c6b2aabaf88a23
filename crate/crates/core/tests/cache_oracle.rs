mod common;

use common::{replay, threshold_hits};
use proptest::prelude::*;

#[test]
fn matches_brute_force_reference_over_1000_ops() {
    for seed in 0..10 {
        for threshold in [0.5, 0.8, 0.95] {
            let (got, want, _) = replay(seed, 1000, threshold);
            assert_eq!(got, want, "seed {seed}, δ {threshold}");
        }
    }
}

#[test]
fn lower_threshold_never_hits_less_without_eviction() {
    // With room for every key the hit count is monotone in δ.
    for seed in 0..10 {
        let hits = threshold_hits(seed, &[0.5, 0.6, 0.7, 0.8, 0.9, 0.99]);
        assert!(hits.windows(2).all(|w| w[0] >= w[1]), "{hits:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn oracle_equivalence_random_seeds(seed in any::<u64>(), threshold in 0.5f64..0.99) {
        let (got, want, _) = replay(seed, 300, threshold);
        prop_assert_eq!(got, want);
    }
}
