use priorcache::cache::CacheParams;
use priorcache::meta::{surrogate_gradients, update, BatchMetrics, MetaConfig, ParamRanges};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn start() -> CacheParams {
    CacheParams {
        capacity: 500.0,
        threshold: 0.8,
        refresh_rate: 0.05,
    }
}

fn random_metrics(rng: &mut ChaCha8Rng) -> BatchMetrics {
    BatchMetrics::new(rng.gen_range(0.0..5.0), rng.gen_range(0.0..=1.0), rng.gen_range(0.0..5.0)).unwrap()
}

#[test]
fn ten_thousand_steps_stay_in_range() {
    let ranges = ParamRanges::default();
    for (i, cfg) in [MetaConfig::default(), MetaConfig::evolution_demo()].into_iter().enumerate() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100 * i as u64);
            let mut p = start();
            for _ in 0..10_000 {
                p = update(&p, &random_metrics(&mut rng), &cfg);
                assert!(ranges.contains(&p), "{p:?}");
            }
        }
    }
}

#[test]
fn extreme_metrics_drive_parameters_toward_bounds() {
    let cfg = MetaConfig::evolution_demo();
    let m = BatchMetrics::new(1e6, 0.0, 1e6).unwrap();
    let mut p = start();
    for _ in 0..10_000 {
        p = update(&p, &m, &cfg);
    }
    assert_eq!(p.threshold, 0.5);
    assert_eq!(p.refresh_rate, 0.2);
    assert!(p.capacity > 500.0 && p.capacity <= 1000.0, "{}", p.capacity);
}

#[test]
fn fixed_point_leaves_parameters_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for cfg in [MetaConfig::default(), MetaConfig::evolution_demo()] {
        for _ in 0..100 {
            let p = CacheParams {
                capacity: rng.gen_range(100.0..=1000.0),
                threshold: rng.gen_range(0.5..=0.99),
                refresh_rate: rng.gen_range(0.01..=0.2),
            };
            assert_eq!(update(&p, &BatchMetrics::fixed_point(), &cfg), p);
        }
    }
}

#[test]
fn invalid_metrics_are_rejected() {
    assert!(BatchMetrics::new(-1.0, 0.5, 0.0).is_err());
    assert!(BatchMetrics::new(0.0, 1.5, 0.0).is_err());
    assert!(BatchMetrics::new(0.0, 0.5, f64::NAN).is_err());
}

fn interior() -> impl Strategy<Value = CacheParams> {
    (150.0f64..950.0, 0.55f64..0.95, 0.02f64..0.18).prop_map(|(k, d, r)| CacheParams {
        capacity: k,
        threshold: d,
        refresh_rate: r,
    })
}

proptest! {
    #[test]
    fn capacity_grows_more_when_hits_are_scarcer(p in interior(), h1 in 0.0f64..1.0, h2 in 0.0f64..1.0, e in 0.0f64..2.0, v in 0.0f64..2.0) {
        let cfg = MetaConfig { project: false, ..MetaConfig::evolution_demo() };
        let (lo, hi) = if h1 < h2 { (h1, h2) } else { (h2, h1) };
        let a = update(&p, &BatchMetrics::new(e, lo, v).unwrap(), &cfg);
        let b = update(&p, &BatchMetrics::new(e, hi, v).unwrap(), &cfg);
        prop_assert!(a.capacity >= b.capacity);
        prop_assert!(a.capacity >= p.capacity);
    }

    #[test]
    fn threshold_falls_with_td_error(p in interior(), e1 in 0.0f64..5.0, e2 in 0.0f64..5.0, h in 0.0f64..=1.0) {
        let cfg = MetaConfig { project: false, ..MetaConfig::evolution_demo() };
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        let a = update(&p, &BatchMetrics::new(lo, h, 0.0).unwrap(), &cfg);
        let b = update(&p, &BatchMetrics::new(hi, h, 0.0).unwrap(), &cfg);
        prop_assert!(b.threshold <= a.threshold);
        prop_assert!(a.threshold <= p.threshold);
    }

    #[test]
    fn refresh_rises_with_variability(p in interior(), v1 in 0.0f64..5.0, v2 in 0.0f64..5.0) {
        let cfg = MetaConfig { project: false, ..MetaConfig::evolution_demo() };
        let (lo, hi) = if v1 < v2 { (v1, v2) } else { (v2, v1) };
        let a = update(&p, &BatchMetrics::new(0.0, 1.0, lo).unwrap(), &cfg);
        let b = update(&p, &BatchMetrics::new(0.0, 1.0, hi).unwrap(), &cfg);
        prop_assert!(b.refresh_rate >= a.refresh_rate);
        prop_assert!(a.refresh_rate >= p.refresh_rate);
    }

    #[test]
    fn gradients_match_closed_form(p in interior(), e in 0.0f64..5.0, h in 0.0f64..=1.0, v in 0.0f64..5.0) {
        let cfg = MetaConfig::default();
        let g = surrogate_gradients(&p, &BatchMetrics::new(e, h, v).unwrap(), &cfg);
        prop_assert!((g.capacity - 0.05 * (1.0 - h) / p.capacity).abs() < 1e-15);
        prop_assert!((g.threshold + 0.1 * e / p.threshold).abs() < 1e-15);
        prop_assert!((g.refresh - 0.02 * v).abs() < 1e-15);
    }

    #[test]
    fn projection_is_idempotent(k in -1e4f64..1e4, d in -2.0f64..2.0, r in -1.0f64..1.0) {
        let ranges = ParamRanges::default();
        let once = ranges.project(CacheParams { capacity: k, threshold: d, refresh_rate: r });
        prop_assert!(ranges.contains(&once));
        prop_assert_eq!(ranges.project(once), once);
    }
}
