use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedgroup::data::NonIidCase;
use fedgroup::orchestrator::StrategyKind;
use fedgroup::runner::{self, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "fedgroup",
    version,
    about = "Federated learning simulator with device grouping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write per-round metrics to CSV.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        case: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (strategy, case, seed) combination, one CSV each.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strategies, e.g. fedavg,fldg.
        #[arg(long)]
        strategies: String,
        /// Comma-separated cases, e.g. 1,2,iid.
        #[arg(long)]
        cases: String,
        /// Inclusive range `0..9` or a list `1,4,7`.
        #[arg(long)]
        seeds: String,
        /// Base path; each cell writes `<stem>-<strategy>-<case>-seed<n>.csv` beside it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Group the devices without training and report purity.
    GroupingReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the device table here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set rounds=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn load<'a>(&'a self, mut flags: Vec<(&'a str, String)>) -> Result<ExperimentConfig> {
        let mut overrides: Vec<(&'a str, String)> = Vec::new();
        for kv in &self.sets {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got '{kv}'");
            };
            overrides.push((k.trim(), v.to_string()));
        }
        overrides.append(&mut flags);
        Ok(runner::parse_config(self.config.as_deref(), &overrides)?)
    }
}

fn flag(key: &str, value: Option<impl ToString>) -> Option<(&str, String)> {
    value.map(|v| (key, v.to_string()))
}

fn parse_list<T>(text: &str) -> Result<Vec<T>>
where
    T: std::str::FromStr<Err = fedgroup::Error>,
{
    text.split(',')
        .map(|s| Ok(s.trim().parse::<T>()?))
        .collect()
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let threads = runner::threads_from_env()?;
    match cli.command {
        Command::Run {
            common,
            seed,
            strategy,
            case,
            out,
        } => {
            let flags = [
                flag("seed", seed),
                flag("strategy", strategy),
                flag("case", case),
                flag("out", out.map(|p| p.display().to_string())),
            ];
            let cfg = common.load(flags.into_iter().flatten().collect())?;
            let outcome = runner::run(&cfg, threads)
                .with_context(|| format!("experiment writing {} failed", cfg.out.display()))?;
            let last = outcome
                .records
                .last()
                .context("experiment produced no rounds")?;
            println!(
                "{} {} seed {}: final accuracy {:.4} after {} rounds -> {}",
                cfg.strategy,
                cfg.case,
                cfg.seed,
                last.test_accuracy,
                last.round,
                cfg.out.display()
            );
        }
        Command::Sweep {
            common,
            strategies,
            cases,
            seeds,
            out,
        } => {
            let flags = flag("out", out.map(|p| p.display().to_string()));
            let base = common.load(flags.into_iter().collect())?;
            let strategies: Vec<StrategyKind> = parse_list(&strategies)?;
            let cases: Vec<NonIidCase> = parse_list(&cases)?;
            let seeds = runner::parse_seed_list(&seeds)?;
            let configs = runner::sweep_configs(&base, &strategies, &cases, &seeds)?;
            let results = runner::sweep(&configs, threads)?;
            for (cfg, (path, outcome)) in configs.iter().zip(&results) {
                let acc = outcome.records.last().map_or(f64::NAN, |r| r.test_accuracy);
                println!(
                    "{} {} seed {}: final accuracy {acc:.4} -> {}",
                    cfg.strategy,
                    cfg.case,
                    cfg.seed,
                    path.display()
                );
            }
        }
        Command::GroupingReport {
            common,
            strategy,
            seed,
            out,
        } => {
            let flags = [flag("strategy", strategy), flag("seed", seed)];
            let cfg = common.load(flags.into_iter().flatten().collect())?;
            let report = runner::grouping_report(&cfg)?;
            let table = report.render();
            match out {
                Some(path) => {
                    fs::write(&path, &table)
                        .with_context(|| format!("writing {}", path.display()))?;
                    println!(
                        "{} groups over {} devices, purity {:.4} -> {}",
                        report.groups.group_count(),
                        report.groups.device_count(),
                        report.purity,
                        path.display()
                    );
                }
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}
