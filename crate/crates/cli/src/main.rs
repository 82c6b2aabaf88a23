use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use priorcache::experiment::{run_suite, ExperimentConfig, SuiteKind};

#[derive(Parser)]
#[command(name = "priorcache", version, about = "Cached-prior posterior sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Comma-separated seed list, overriding `run.seeds`.
    #[arg(long)]
    seeds: Option<String>,

    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Online training, cached against uncached.
    Train(Common),
    /// CQL and CQL-Prior on offline datasets.
    Offline(Common),
    /// KL bound sweep and the refresh decay check.
    ValidateBound(Common),
    /// Virtual-latency statistics of short cached runs.
    BenchLatency(Common),
    /// All online variants side by side.
    Ablate(Common),
    /// Few-shot adaptation of the mock prior.
    AdaptPrior(Common),
    /// Any combination of suites.
    Suite {
        #[command(flatten)]
        common: Common,
        /// Comma-separated suites, or `all`.
        #[arg(long, default_value = "all")]
        suites: String,
    },
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut overrides: Vec<(&str, String)> = Vec::new();
    if let Some(s) = &common.seeds {
        overrides.push(("run.seeds", s.clone()));
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        overrides.push((k.trim(), v.trim().to_string()));
    }
    Ok(ExperimentConfig::parse_with(&text, &overrides)?)
}

fn run(common: &Common, suites: &[SuiteKind]) -> anyhow::Result<bool> {
    let cfg = load(common)?;
    let report = run_suite(&cfg, suites, Path::new(&common.out))?;
    for c in &report.manifest.checks {
        println!(
            "{} {}/{}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.suite,
            c.name,
            c.detail
        );
    }
    println!("outputs written to {}", report.out_dir.display());
    Ok(report.pass())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(c) => run(c, &[SuiteKind::Online]),
        Command::Offline(c) => run(c, &[SuiteKind::Offline]),
        Command::ValidateBound(c) => run(c, &[SuiteKind::Bound, SuiteKind::Corollary]),
        Command::BenchLatency(c) => run(c, &[SuiteKind::Latency]),
        Command::Ablate(c) => run(c, &[SuiteKind::Ablation]),
        Command::AdaptPrior(c) => run(c, &[SuiteKind::Fewshot]),
        Command::Suite { common, suites } => {
            SuiteKind::parse_list(suites).map_err(Into::into).and_then(|s| run(common, &s))
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
