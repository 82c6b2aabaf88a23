use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--seeds",
    "0,1",
    "--set",
    "run.episodes=30",
    "--set",
    "offline.episodes=20",
    "--set",
    "offline.epochs=20",
    "--set",
    "bound.samples=50",
    "--set",
    "corollary.episodes=40",
    "--set",
    "provider.fewshot.steps=200",
];

fn priorcache(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_priorcache")).args(args).output().unwrap()
}

fn run_small(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    priorcache(&args)
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn every_subcommand_writes_its_outputs() {
    let cases: &[(&str, &[&str])] = &[
        ("train", &["metrics.csv", "online.csv", "params.csv"]),
        ("offline", &["offline.csv", "offline_runs.csv"]),
        ("validate-bound", &["bound.csv", "corollary.csv"]),
        ("bench-latency", &["latency.csv"]),
        ("ablate", &["ablation.csv"]),
        ("adapt-prior", &["fewshot.csv"]),
    ];
    for (cmd, files) in cases {
        let dir = TempDir::new().unwrap();
        let out = run_small(cmd, dir.path(), &[]);
        let code = out.status.code().unwrap();
        assert!(code == 0 || code == 1, "{cmd}: exit {code}, {}", String::from_utf8_lossy(&out.stderr));
        let names = listing(dir.path());
        for f in *files {
            assert!(names.iter().any(|n| n == f), "{cmd}: missing {f} in {names:?}");
        }
        let m = manifest(dir.path());
        assert_eq!(m["seeds"], serde_json::json!([0, 1]));
        assert_eq!(m["pass"].as_bool().unwrap(), code == 0);
        let stdout = String::from_utf8(out.stdout).unwrap();
        let checks = m["checks"].as_array().unwrap().len();
        assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), checks);
    }
}

#[test]
fn identical_runs_are_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        let out = run_small("suite", dir.path(), &["--suites", "online,bound,fewshot"]);
        assert!(out.status.code().unwrap() <= 1);
    }
    assert_eq!(listing(a.path()), listing(b.path()));
    for name in listing(a.path()) {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name}");
    }
}

#[test]
fn config_file_then_overrides() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small run\nrun.seeds = 3,4\nrun.episodes = 10\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = priorcache(&["bench-latency", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.code().unwrap() <= 1);
    assert_eq!(manifest(&out_dir)["seeds"], serde_json::json!([3, 4]));

    let out = priorcache(&[
        "bench-latency",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "7",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.code().unwrap() <= 1);
    assert_eq!(manifest(&out_dir)["seeds"], serde_json::json!([7]));
}

#[test]
fn bad_input_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["train", "--out", out, "--set", "nope.key=1"],
        vec!["train", "--out", out, "--set", "run.episodes"],
        vec!["train", "--out", out, "--seeds", "a,b"],
        vec!["train", "--out", out, "--config", "/definitely/missing.cfg"],
        vec!["suite", "--out", out, "--suites", "nope"],
    ] {
        let o = priorcache(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"), "{args:?}");
    }
}

#[test]
fn empty_suite_list_writes_only_the_manifest() {
    let dir = TempDir::new().unwrap();
    let out = priorcache(&["suite", "--suites", "", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(listing(dir.path()), vec!["manifest.json"]);
}
