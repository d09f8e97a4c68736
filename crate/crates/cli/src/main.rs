//! Experiment runner for the capsim node simulator.

mod config;
mod runner;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use config::{ConfigFile, Overrides, ResolvedConfig, PRESETS};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "capsim",
    version,
    about = "Simulate a power-capped disaggregated LLM inference node"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonOpts {
    /// Experiment config file (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named configuration to start from.
    #[arg(long)]
    preset: Option<String>,
    /// QPS/GPU values, comma separated (single runs use the first).
    #[arg(long, value_delimiter = ',')]
    qps: Option<Vec<f64>>,
    /// SLO scale factors, comma separated (1.0 = nominal targets).
    #[arg(long = "slo-scale", value_delimiter = ',')]
    slo_scale: Option<Vec<f64>>,
    /// Seed-distinct repetitions per sweep point.
    #[arg(long)]
    repeats: Option<usize>,
    /// Base random seed; run seeds derive as seed + repeat index.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Concurrent runs (each run stays single-threaded).
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Replay this trace file instead of generating a workload.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write its artifacts.
    Run(CommonOpts),
    /// Run a QPS x SLO-scale grid and emit curve tables.
    Sweep(CommonOpts),
    /// Run several configurations on one identical workload.
    Compare {
        #[command(flatten)]
        common: CommonOpts,
        /// Configurations to compare: preset names or config-file paths.
        #[arg(required = true)]
        entries: Vec<String>,
    },
    /// Generate a workload and save it as a trace file.
    GenTrace {
        #[command(flatten)]
        common: CommonOpts,
        /// Trace file to write (.csv or .jsonl).
        #[arg(long, default_value = "trace.csv")]
        file: PathBuf,
    },
    /// Check budget, buffer, and controller invariants of an event trace.
    Audit {
        /// Path to an events.jsonl written by `run`.
        trace: PathBuf,
    },
    /// List the named configurations.
    Presets,
}

fn resolve_common(common: &CommonOpts) -> Result<ResolvedConfig> {
    let file = match &common.config {
        Some(path) => Some(ConfigFile::load(path)?),
        None => None,
    };
    let overrides = Overrides {
        preset: common.preset.clone(),
        qps: common.qps.clone(),
        slo_scale: common.slo_scale.clone(),
        repeats: common.repeats,
        seed: common.seed,
        trace: common.trace.clone(),
    };
    config::resolve(file.as_ref(), &overrides)
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(common) => {
            let config = resolve_common(&common)?;
            runner::cmd_run(&config, &common.out)
        }
        Command::Sweep(common) => {
            let config = resolve_common(&common)?;
            runner::cmd_sweep(&config, &common.out, common.parallel.max(1))
        }
        Command::Compare { common, entries } => {
            let base = resolve_common(&common)?;
            let mut resolved = Vec::new();
            for entry in &entries {
                let mut opts = common.clone();
                if entry.ends_with(".json") || std::path::Path::new(entry).exists() {
                    opts.config = Some(PathBuf::from(entry));
                    opts.preset = None;
                } else {
                    opts.preset = Some(entry.clone());
                }
                let config = resolve_common(&opts)?;
                let name = entry
                    .trim_end_matches(".json")
                    .rsplit('/')
                    .next()
                    .unwrap_or(entry)
                    .to_string();
                resolved.push((name, config));
            }
            runner::cmd_compare(&base, &resolved, &common.out, common.parallel.max(1))
        }
        Command::GenTrace { common, file } => {
            let config = resolve_common(&common)?;
            runner::cmd_gen_trace(&config, &file)
        }
        Command::Audit { trace } => runner::cmd_audit(&trace),
        Command::Presets => {
            for name in PRESETS {
                println!("{name}");
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        for name in PRESETS {
            let overrides = Overrides {
                preset: Some((*name).to_string()),
                ..Overrides::default()
            };
            let config = config::resolve(None, &overrides).unwrap();
            let total: u32 = config.sim.gpus.iter().map(|g| g.cap_w).sum();
            assert!(
                total <= config.sim.node_power_budget_w,
                "{name} over budget"
            );
        }
        assert!(config::preset("nope").is_err());
    }

    #[test]
    fn unknown_preset_fails() {
        let overrides = Overrides {
            preset: Some("not-a-preset".into()),
            ..Overrides::default()
        };
        assert!(config::resolve(None, &overrides).is_err());
    }

    #[test]
    fn qps_flag_overrides_workload_rate() {
        let overrides = Overrides {
            preset: Some("4p4d-600".into()),
            qps: Some(vec![2.0, 2.5]),
            ..Overrides::default()
        };
        let config = config::resolve(None, &overrides).unwrap();
        assert_eq!(config.workload.qps_per_gpu(), 2.0);
        assert_eq!(config.qps, vec![2.0, 2.5]);
    }
}
