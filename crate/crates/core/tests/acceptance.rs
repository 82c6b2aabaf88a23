//! The twelve acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test -p priorcache --test acceptance` prints the report.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use priorcache::cache::CacheParams;
use priorcache::cql::{cql_prior_loss, CQLConfig};
use priorcache::distribution::PriorDistribution;
use priorcache::embedding::Embedding;
use priorcache::env::StateId;
use priorcache::experiment::online::latency_report;
use priorcache::experiment::suites;
use priorcache::experiment::{Check, ExperimentConfig};
use priorcache::meta::{update, BatchMetrics, MetaConfig, ParamRanges};
use priorcache::policy::{kl_regularized_policy, posterior_weights, select_action, temperature, TemperatureSchedule};
use priorcache::provider::{demo_loss, demo_loss_grad, LatencyModel, PriorProvider, ProviderStats};
use priorcache::rl::{HybridAction, QTable, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }

    fn timed(mut self, elapsed: Duration, limit_s: u64) -> Self {
        self.pass &= elapsed.as_secs_f64() < limit_s as f64;
        self.detail = format!("{}; {:.1}s (< {limit_s}s)", self.detail, elapsed.as_secs_f64());
        self
    }
}

fn from_checks(checks: &[Check], names: &[&str]) -> Verdict {
    let picked: Vec<&Check> = names
        .iter()
        .map(|n| checks.iter().find(|c| c.name == *n).unwrap_or_else(|| panic!("no check {n}")))
        .collect();
    Verdict::new(
        picked.iter().all(|c| c.pass),
        picked.iter().map(|c| c.detail.as_str()).collect::<Vec<_>>().join("; "),
    )
}

struct Fixed(PriorDistribution, u64);

impl PriorProvider for Fixed {
    fn query(&mut self, _: StateId) -> priorcache::Result<PriorDistribution> {
        self.1 += 1;
        Ok(self.0.clone())
    }

    fn stats(&self) -> ProviderStats {
        ProviderStats {
            query_count: self.1,
            simulated_latency_total: 0.0,
        }
    }
}

fn latency_arithmetic(cfg: &ExperimentConfig) -> Verdict {
    let t = Instant::now();
    let model = LatencyModel {
        hit_cost_ms: 18.7,
        miss_cost_ms: 349.0,
    };
    let steps: Vec<f64> = (0..1000).map(|i| model.cost(i < 784)).collect();
    let fixed = latency_report(&steps, 784, 1000, &model).unwrap();
    let live = suites::latency_suite(cfg).unwrap();
    let mut v = from_checks(&live.checks, &["live_run_regime"]);
    v.pass &= (fixed.weighted_mean_ms - 90.04).abs() <= 0.01;
    v.detail = format!("weighted mean at h = 0.784: {:.4} ms; {}", fixed.weighted_mean_ms, v.detail);
    v.timed(t.elapsed(), 60)
}

fn posterior_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let key = Embedding::normalized(vec![1.0]);
    let draws = 100_000u64;
    let mut worst_z: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.gen_range(2..=6);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tau = rng.gen_range(0.1..1.0);
        let prior = PriorDistribution::from_weights(w).unwrap();
        let post = posterior_weights(&prior, &q, tau).unwrap();
        let mut provider = Fixed(prior.clone(), 0);
        let mut counts = vec![0u64; n];
        for t in 0..draws {
            counts[select_action(StateId(0), &key, None, &mut provider, &q, tau, n, &mut rng, t).unwrap().action] += 1;
        }
        let kl = kl_regularized_policy(&prior, &q, tau).unwrap();
        for a in 0..n {
            let p = post.prob(a);
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            worst_z = worst_z.max((counts[a] as f64 - draws as f64 * p).abs() / sigma);
            worst_gap = worst_gap.max((kl.prob(a) - p).abs());
        }
    }
    Verdict::new(
        worst_z <= 3.0 && worst_gap <= 1e-12,
        format!("max |z| {worst_z:.3} (≤ 3) over 10 triples × 10⁵ draws; max |π_KL − w| {worst_gap:.1e} (≤ 1e-12)"),
    )
}

fn temperature_schedule() -> Verdict {
    let s = TemperatureSchedule::default();
    let t0 = temperature(0.0, &s).unwrap();
    let t1 = temperature(1.0, &s).unwrap();
    let grid: Vec<f64> = (0..100).map(|i| temperature(i as f64 / 99.0, &s).unwrap()).collect();
    let decreasing = grid.windows(2).all(|w| w[1] < w[0]);
    Verdict::new(
        t0 == 0.8 && (t1 - 0.10827).abs() <= 1e-5 && decreasing,
        format!("τ(0) = {t0}, τ(1) = {t1:.6}, strictly decreasing on 100 points: {decreasing}"),
    )
}

fn meta_optimizer() -> Verdict {
    let ranges = ParamRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let start = CacheParams {
        capacity: 500.0,
        threshold: 0.8,
        refresh_rate: 0.05,
    };
    let mut in_range = true;
    for cfg in [MetaConfig::default(), MetaConfig::evolution_demo()] {
        let mut p = start;
        for _ in 0..10_000 {
            let m = BatchMetrics::new(rng.gen_range(0.0..5.0), rng.gen_range(0.0..=1.0), rng.gen_range(0.0..5.0)).unwrap();
            p = update(&p, &m, &cfg);
            in_range &= ranges.contains(&p);
        }
    }
    let fixed = update(&start, &BatchMetrics::fixed_point(), &MetaConfig::evolution_demo()) == start;
    let free = MetaConfig {
        project: false,
        ..MetaConfig::evolution_demo()
    };
    let mut directional = true;
    for _ in 0..1000 {
        let (e, h, v) = (rng.gen_range(0.01..5.0), rng.gen_range(0.01..=1.0), rng.gen_range(0.0..5.0));
        let m = |e, h, v| BatchMetrics::new(e, h, v).unwrap();
        let base = update(&start, &m(e, h, v), &free);
        directional &= update(&start, &m(e, h * 0.5, v), &free).capacity > base.capacity
            && update(&start, &m(e + 1.0, h, v), &free).threshold < base.threshold
            && update(&start, &m(e, h, v + 1.0), &free).refresh_rate > base.refresh_rate;
    }
    Verdict::new(
        in_range && fixed && directional,
        format!("in range over 10⁴ steps: {in_range}; fixed point unchanged: {fixed}; directional on 1000 sweeps: {directional}"),
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gradient_checks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-5;
    let (n_states, n_actions) = (4u64, 3usize);
    let mut worst_cql: f64 = 0.0;
    for _ in 0..20 {
        let mut q = QTable::new(n_actions, 0.9, 1.0);
        let mut target = QTable::new(n_actions, 0.9, 1.0);
        let mut behavior = BTreeMap::new();
        let mut prior = BTreeMap::new();
        for s in 0..n_states {
            for a in 0..n_actions {
                q.set(StateId(s), a, rng.gen_range(-2.0..2.0));
                target.set(StateId(s), a, rng.gen_range(-2.0..2.0));
            }
            let mut w = || PriorDistribution::from_weights((0..n_actions).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap();
            behavior.insert(StateId(s), w());
            prior.insert(StateId(s), w());
        }
        let batch: Vec<Transition> = (0..8)
            .map(|_| Transition {
                state: StateId(rng.gen_range(0..n_states)),
                action: HybridAction::discrete(rng.gen_range(0..n_actions)),
                reward: rng.gen_range(-1.0..1.0),
                next_state: StateId(rng.gen_range(0..n_states)),
                done: rng.gen_bool(0.2),
            })
            .collect();
        let cfg = CQLConfig {
            alpha: rng.gen_range(0.0..2.0),
            beta: rng.gen_range(0.0..2.0),
            gamma: 0.9,
            ..CQLConfig::default()
        };
        let loss = |q: &QTable| cql_prior_loss(q, &target, &batch, &behavior, Some(&prior), &cfg).unwrap().0.total;
        let (_, grad) = cql_prior_loss(&q, &target, &batch, &behavior, Some(&prior), &cfg).unwrap();
        for s in (0..n_states).map(StateId) {
            for a in 0..n_actions {
                let (mut plus, mut minus) = (q.clone(), q.clone());
                plus.set(s, a, q.get(s, a) + h);
                minus.set(s, a, q.get(s, a) - h);
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                worst_cql = worst_cql.max(rel_err(grad.get(&s).map_or(0.0, |g| g[a]), fd));
            }
        }
    }
    let mut worst_adapt: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(2..8);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let target = rng.gen_range(0..n);
        let lambda = rng.gen_range(0.0..0.5);
        let g = demo_loss_grad(&z, target, lambda);
        for k in 0..n {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[k] += h;
            zm[k] -= h;
            let fd = (demo_loss(&zp, target, lambda) - demo_loss(&zm, target, lambda)) / (2.0 * h);
            worst_adapt = worst_adapt.max(rel_err(g[k], fd));
        }
    }
    Verdict::new(
        worst_cql <= 1e-5 && worst_adapt <= 1e-4,
        format!("max relative error over 20 points: cql_prior_loss {worst_cql:.1e} (≤ 1e-5), adapt_prior {worst_adapt:.1e} (≤ 1e-4)"),
    )
}

fn cache_oracle() -> Verdict {
    let mut identical = 0;
    let mut total = 0;
    for seed in 0..10 {
        for threshold in [0.5, 0.8, 0.95] {
            let (got, want, _) = common::replay(seed, 1000, threshold);
            total += 1;
            identical += usize::from(got == want);
        }
    }
    let monotone = (0..10).all(|seed| {
        common::threshold_hits(seed, &[0.5, 0.6, 0.7, 0.8, 0.9, 0.99])
            .windows(2)
            .all(|w| w[0] >= w[1])
    });
    Verdict::new(
        identical == total && monotone,
        format!("{identical}/{total} workloads of 10³ ops match the brute-force reference; threshold monotone: {monotone}"),
    )
}

#[test]
fn acceptance() {
    let cfg = ExperimentConfig::default();
    let mut report: Vec<(u8, &str, Verdict)> = Vec::new();

    let t = Instant::now();
    let online = suites::online_suite(&cfg).unwrap();
    let elapsed = t.elapsed();
    report.push((1, "query reduction", from_checks(&online.checks, &["query_reduction"]).timed(elapsed, 120)));
    report.push((2, "performance retention", from_checks(&online.checks, &["performance_retention"])));

    let t = Instant::now();
    let bound = suites::bound_suite(&cfg).unwrap();
    report.push((3, "bound holds", from_checks(&bound.checks, &["no_violations"]).timed(t.elapsed(), 60)));

    report.push((4, "latency arithmetic", latency_arithmetic(&cfg)));
    report.push((5, "posterior correctness", posterior_correctness()));
    report.push((6, "temperature schedule", temperature_schedule()));
    report.push((7, "meta-optimizer", meta_optimizer()));

    let t = Instant::now();
    let offline = suites::offline_suite(&cfg).unwrap();
    let names = ["faster_convergence", "higher_final_performance", "query_ratio_ordering"];
    report.push((8, "CQL-Prior", from_checks(&offline.checks, &names).timed(t.elapsed(), 300)));

    report.push((9, "gradient checks", gradient_checks()));
    report.push((10, "cache oracle equivalence", cache_oracle()));

    let corollary = suites::corollary_suite(&cfg).unwrap();
    let mut v = from_checks(&corollary.checks, &["decay_with_refresh"]);
    v.pass &= corollary.with_refresh.windows >= 5;
    v.detail = format!("{}; {} windows", v.detail, corollary.with_refresh.windows);
    report.push((11, "corollary decay", v));

    let fewshot = suites::fewshot_suite(&cfg).unwrap();
    report.push((12, "few-shot adaptation", from_checks(&fewshot.checks, &["cross_entropy_halved", "greedy_prior_improves"])));

    // Written to the handle directly so the report survives output capture.
    let mut out = std::io::stdout().lock();
    for (n, name, v) in &report {
        let status = if v.pass { "PASS" } else { "FAIL" };
        writeln!(out, "{status} criterion {n:>2} {name}: {}", v.detail).unwrap();
    }
    drop(out);
    let failed: Vec<u8> = report.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
