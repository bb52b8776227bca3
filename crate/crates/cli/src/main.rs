use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use meshsim_core::cluster::{PolicyKind, SimResult};
use meshsim_core::config::ExperimentConfig;
use meshsim_core::experiment;
use meshsim_core::metrics::SummaryReport;

/// Simulate shared serverless LLM serving on CPU and GPU nodes.
#[derive(Debug, Parser)]
#[command(name = "meshsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and write its result files.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run several policies on the same request stream and compare them.
    Compare {
        config: PathBuf,
        /// Comma-separated policies: mesh, exclusive, exclusive_cpu.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "mesh,exclusive,exclusive_cpu"
        )]
        policies: Vec<PolicyKind>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config value, e.g. `--set policy.disable_cpu=true`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Print a line to stdout, tolerating a closed pipe (e.g. `meshsim ... | head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<meshsim_core::Error> for Failure {
    fn from(e: meshsim_core::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn load(config: &Path, common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &common.out {
        let abs = std::path::absolute(out).unwrap_or_else(|_| out.clone());
        let quoted = toml::Value::String(abs.display().to_string());
        overrides.push(format!("output.dir={quoted}"));
    }
    ExperimentConfig::load(config, &overrides)
        .with_context(|| format!("loading {}", config.display()))
        .map_err(Failure::Config)
}

fn print_summary(s: &SummaryReport) {
    say!(
        "{:<14} total {:>6}  compliant {:>6} ({:>5.1}%)  dropped {:>6}  cpu nodes {:.2}  gpu nodes {:.2}",
        s.policy,
        s.total_requests,
        s.compliant,
        100.0 * s.slo_compliance_rate,
        s.dropped,
        s.cpu_nodes_in_use_avg,
        s.gpu_nodes_in_use_avg,
    );
}

fn cmd_run(config: &Path, common: &Common) -> Result<(), Failure> {
    let cfg = load(config, common)?;
    let result = experiment::run(&cfg)?;
    experiment::write_outputs(&cfg, &result, &cfg.output.dir)?;
    print_summary(&result.summary);
    say!("results written to {}", cfg.output.dir.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct Comparison<'a> {
    reference: &'a str,
    summaries: Vec<&'a SummaryReport>,
    /// `(reference_compliant - other_compliant) / other_compliant`, or null
    /// when the other policy served nothing.
    improvement: std::collections::BTreeMap<&'a str, Option<f64>>,
}

fn cmd_compare(config: &Path, policies: &[PolicyKind], common: &Common) -> Result<(), Failure> {
    if policies.is_empty() {
        return Err(Failure::Config(anyhow::anyhow!(
            "--policies must name at least one policy"
        )));
    }
    let base = load(config, common)?;
    let mut configs = Vec::new();
    for &p in policies {
        let mut cfg = base.clone();
        cfg.policy.kind = p;
        cfg.output.dir = base.output.dir.join(p.as_str());
        configs.push(cfg);
    }
    let results: Vec<Result<SimResult, meshsim_core::Error>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|cfg| s.spawn(move || experiment::run(cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let mut done = Vec::new();
    for (cfg, r) in configs.iter().zip(results) {
        let r = r?;
        experiment::write_outputs(cfg, &r, &cfg.output.dir)?;
        print_summary(&r.summary);
        done.push(r);
    }

    let reference = policies
        .iter()
        .position(|&p| p == PolicyKind::Mesh)
        .unwrap_or(0);
    let ref_compliant = done[reference].summary.compliant as f64;
    let improvement = policies
        .iter()
        .zip(&done)
        .enumerate()
        .filter(|(i, _)| *i != reference)
        .map(|(_, (p, r))| {
            let other = r.summary.compliant as f64;
            (
                p.as_str(),
                (other > 0.0).then(|| (ref_compliant - other) / other),
            )
        })
        .collect();
    let cmp = Comparison {
        reference: policies[reference].as_str(),
        summaries: done.iter().map(|r| &r.summary).collect(),
        improvement,
    };
    for (p, imp) in &cmp.improvement {
        match imp {
            Some(v) => say!(
                "{} vs {p}: {:+.1}% SLO-compliant requests",
                cmp.reference,
                100.0 * v
            ),
            None => say!(
                "{} vs {p}: n/a ({p} served no compliant requests)",
                cmp.reference
            ),
        }
    }
    let path = base.output.dir.join("comparison.json");
    let mut text = serde_json::to_string_pretty(&cmp).expect("comparison serializes");
    text.push('\n');
    std::fs::create_dir_all(&base.output.dir)
        .and_then(|_| std::fs::write(&path, text))
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Runtime)?;
    say!("results written to {}", base.output.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, common } => cmd_run(config, common),
        Command::Compare {
            config,
            policies,
            common,
        } => cmd_compare(config, policies, common),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
