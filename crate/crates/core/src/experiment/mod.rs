//! Seeded experiment orchestration and file outputs.
//!
//! [`run_suite`] runs any subset of the suites, writes their CSV/JSONL
//! outputs and a `manifest.json` with the config hash, seeds, a git-style
//! blob hash per output file and every check with its verdict.

pub mod config;
pub mod online;
pub mod setup;
pub mod suites;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::ExperimentConfig;
pub use online::{run_online, RunOptions, SeedRun, Variant, VariantSummary};
pub use suites::Check;

use crate::error::{Error, Result};
use crate::meta::write_param_csv;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    Online,
    Offline,
    Bound,
    Corollary,
    Latency,
    Ablation,
    Fewshot,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 7] = [
        SuiteKind::Online,
        SuiteKind::Offline,
        SuiteKind::Bound,
        SuiteKind::Corollary,
        SuiteKind::Latency,
        SuiteKind::Ablation,
        SuiteKind::Fewshot,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            SuiteKind::Online => "online",
            SuiteKind::Offline => "offline",
            SuiteKind::Bound => "bound",
            SuiteKind::Corollary => "corollary",
            SuiteKind::Latency => "latency",
            SuiteKind::Ablation => "ablation",
            SuiteKind::Fewshot => "fewshot",
        }
    }

    /// Parses a comma-separated list; `all` selects every suite.
    pub fn parse_list(s: &str) -> Result<Vec<SuiteKind>> {
        let mut out = Vec::new();
        let mut errs = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                out.extend(Self::ALL);
                continue;
            }
            match part.parse() {
                Ok(k) => out.push(k),
                Err(e) => errs.push(e),
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl FromStr for SuiteKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SuiteKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| format!("unknown suite `{s}`"))
    }
}

/// Blob id in git's SHA-256 object format: SHA-256 of `"blob {len}\0"`
/// followed by the content.
pub fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub suites: Vec<SuiteKind>,
    pub files: BTreeMap<String, String>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub manifest: Manifest,
    pub out_dir: PathBuf,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.manifest.pass
    }

    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.manifest.checks.iter().filter(|c| !c.pass)
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn write_online(out: &mut Outputs, prefix: &str, o: &suites::OnlineOutcome, cfg: &ExperimentConfig) -> Result<()> {
    let metrics = if prefix.is_empty() { "metrics.csv".to_string() } else { format!("{prefix}_metrics.csv") };
    let params = if prefix.is_empty() { "params.csv".to_string() } else { format!("{prefix}_params.csv") };
    out.write(&metrics, |w| online::write_episodes(w, &o.runs))?;
    let rows: Vec<_> = o.runs.iter().flat_map(|r| r.params.iter().cloned()).collect();
    out.write(&params, |w| write_param_csv(w, &rows))?;
    let summary = if prefix.is_empty() { "online.csv".to_string() } else { format!("{prefix}.csv") };
    out.write(&summary, |w| online::write_summaries(w, &o.summaries))?;
    if prefix.is_empty() {
        if let Some(run) = o.runs.iter().find(|r| r.cache.is_some()) {
            let names = config_action_names(cfg)?;
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let cache = run.cache.as_ref().expect("checked");
            out.write("cache.jsonl", |w| cache.export_jsonl(w, &names))?;
            out.write("qtable.csv", |w| run.agent.q().write_csv(w, &names))?;
        }
        if cfg.run.trace {
            out.write("trace.jsonl", |w| online::write_traces(w, &o.runs))?;
        }
    }
    Ok(())
}

fn config_action_names(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let env = setup::build_env(cfg)?;
    Ok(env.task().action_names().iter().map(|s| s.to_string()).collect())
}

/// Runs `suites` and writes their outputs plus `manifest.json` to `out_dir`.
pub fn run_suite(cfg: &ExperimentConfig, suites: &[SuiteKind], out_dir: &Path) -> Result<SuiteReport> {
    fs::create_dir_all(out_dir)?;
    let mut out = Outputs {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };
    let mut checks = Vec::new();
    let mut kinds = suites.to_vec();
    kinds.sort();
    kinds.dedup();
    for kind in &kinds {
        log::info!("running {} suite", kind.label());
        match kind {
            SuiteKind::Online => {
                let o = suites::online_suite(cfg)?;
                write_online(&mut out, "", &o, cfg)?;
                checks.extend(o.checks);
            }
            SuiteKind::Ablation => {
                let o = suites::ablation_suite(cfg)?;
                write_online(&mut out, "ablation", &o, cfg)?;
                checks.extend(o.checks);
            }
            SuiteKind::Latency => {
                let o = suites::latency_suite(cfg)?;
                out.write("latency.csv", |w| suites::write_rows(w, &o.rows))?;
                checks.extend(o.checks);
            }
            SuiteKind::Bound => {
                let o = suites::bound_suite(cfg)?;
                out.write("bound.csv", |w| o.report.write_csv(w))?;
                out.write("bound_levels.csv", |w| suites::write_rows(w, &o.report.levels))?;
                checks.extend(o.checks);
            }
            SuiteKind::Corollary => {
                let o = suites::corollary_suite(cfg)?;
                out.write("corollary.csv", |w| suites::write_rows(w, &o.rows))?;
                checks.extend(o.checks);
            }
            SuiteKind::Fewshot => {
                let o = suites::fewshot_suite(cfg)?;
                let names = config_action_names(cfg)?;
                #[derive(Serialize)]
                struct Demo<'a> {
                    state: u64,
                    action: &'a str,
                }
                let demos: Vec<Demo> = o
                    .demos
                    .iter()
                    .map(|(s, a)| Demo {
                        state: s.0,
                        action: &names[*a],
                    })
                    .collect();
                out.write("fewshot_demos.csv", |w| suites::write_rows(w, &demos))?;
                #[derive(Serialize)]
                struct CurvePoint {
                    step: usize,
                    loss: f64,
                    cross_entropy: f64,
                }
                let curve: Vec<CurvePoint> = o
                    .report
                    .loss_curve
                    .iter()
                    .zip(&o.report.cross_entropy_curve)
                    .enumerate()
                    .map(|(step, (l, c))| CurvePoint {
                        step,
                        loss: *l,
                        cross_entropy: *c,
                    })
                    .collect();
                out.write("fewshot_curve.csv", |w| suites::write_rows(w, &curve))?;
                #[derive(Serialize)]
                struct Summary {
                    cross_entropy_before: f64,
                    cross_entropy_after: f64,
                    cross_entropy_reduction: f64,
                    greedy_success_before: f64,
                    greedy_success_after: f64,
                }
                let s = Summary {
                    cross_entropy_before: o.report.initial_cross_entropy(),
                    cross_entropy_after: o.report.final_cross_entropy(),
                    cross_entropy_reduction: o.report.cross_entropy_reduction(),
                    greedy_success_before: o.success_before,
                    greedy_success_after: o.success_after,
                };
                out.write("fewshot.csv", |w| suites::write_rows(w, &[s]))?;
                checks.extend(o.checks);
            }
            SuiteKind::Offline => {
                let o = suites::offline_suite(cfg)?;
                out.write("offline.csv", |w| suites::write_rows(w, &o.summary))?;
                out.write("offline_runs.csv", |w| suites::write_rows(w, &o.runs))?;
                out.write("offline_curve.csv", |w| suites::write_rows(w, &o.curves))?;
                checks.extend(o.checks);
            }
        }
    }

    let mut files = BTreeMap::new();
    for name in &out.files {
        files.insert(name.clone(), git_blob_hash(&fs::read(out_dir.join(name))?));
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seeds: cfg.run.seeds.clone(),
        suites: kinds,
        files,
        pass: checks.iter().all(|c| c.pass),
        checks,
    };
    let mut w = BufWriter::new(File::create(out_dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(SuiteReport {
        manifest,
        out_dir: out_dir.to_path_buf(),
    })
}
