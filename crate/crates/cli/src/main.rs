//! `fou`: simulate, estimate and study the periodic-mean fractional OU
//! process from a JSON configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use fou_core::config::{Config, ConfigError};
use fou_core::estimator::estimate_report;
use fou_core::experiments::{self, run_clt, run_consistency, run_coupling};
use fou_core::io::{parse_path_csv, path_csv};
use fou_core::model::simulate_path;
use fou_core::{LimitMatrices, SamplePath};

#[derive(Parser, Debug)]
#[command(name = "fou", version, about = "Periodic-mean fractional Ornstein-Uhlenbeck toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Override a configuration key, e.g. `--set alpha=2` or `--set clt.n=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for Monte Carlo studies; overrides `workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one path and write `path.csv`.
    Simulate,
    /// Estimate theta from a path file and write `estimate.json`.
    Estimate {
        /// Path CSV; defaults to `<out>/path.csv`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compute the limit matrices and write `limits.json`.
    Limits,
    /// Consistency study; writes `consistency.json` and `consistency_replicates.csv`.
    McConsistency,
    /// Normal-limit study; writes `clt.json`, `clt_replicates.csv` and `clt_qq.csv`.
    McClt,
    /// Shared-noise coupling of two starts; writes `coupling.json`.
    Coupling,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(String),
    Io(String),
    Run(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn run_err(e: impl std::fmt::Display) -> Failure {
    Failure::Run(e.to_string())
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let target = dir.join(name);
    fs::write(&target, contents).map_err(|e| Failure::Io(format!("{}: {e}", target.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(run_err)?;
    text.push('\n');
    write(dir, name, &text)
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("--config is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let mut overrides = cli.overrides.clone();
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    Ok(Config::from_json(&text, &overrides)?)
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Returns whether the subcommand's check passed.
fn execute(cli: &Cli) -> Result<bool, Failure> {
    let config = load_config(cli)?;
    let out = cli.out.as_path();
    fs::create_dir_all(out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
    let model = config.model().map_err(|e| Failure::Config(e.to_string()))?;

    match &cli.command {
        Command::Simulate => {
            let path = simulate_path(&model, config.n_periods, config.step(), config.seed, config.start())
                .map_err(run_err)?;
            write(out, "path.csv", &path_csv(&path, true))?;
            println!("simulate: {} grid points written to {}", path.x.len(), out.join("path.csv").display());
            Ok(true)
        }
        Command::Estimate { input } => {
            let input = input.clone().unwrap_or_else(|| out.join("path.csv"));
            let text = fs::read_to_string(&input).map_err(|e| Failure::Io(format!("{}: {e}", input.display())))?;
            let table = parse_path_csv(&text).map_err(|e| Failure::Io(format!("{}: {e}", input.display())))?;
            let m = table
                .steps_per_period()
                .map_err(|e| Failure::Io(format!("{}: {e}", input.display())))?;
            if m != config.step_denominator {
                return Err(Failure::Config(format!(
                    "path file has {m} steps per period, configuration says {}",
                    config.step_denominator
                )));
            }
            let path = SamplePath::new(model, m, table.x, table.db, config.history_steps()).map_err(run_err)?;
            let report = estimate_report(&path, &config.estimate_options()).map_err(run_err)?;
            write_json(out, "estimate.json", &report)?;
            match &report.theta_hat {
                Some(theta) => println!("estimate: theta_hat = {theta:?}"),
                None => println!("estimate: degenerate design, theta not identified"),
            }
            Ok(true)
        }
        Command::Limits => {
            let limits = LimitMatrices::compute(&model).map_err(run_err)?;
            write_json(out, "limits.json", &limits)?;
            println!(
                "limits: gamma = {}, clt_valid = {}, degenerate_limit = {}",
                limits.gamma, limits.flags.clt_valid, limits.flags.degenerate_limit
            );
            Ok(true)
        }
        Command::McConsistency => {
            let mc = config.consistency_config()?;
            let report = run_consistency(&mc).map_err(run_err)?;
            write_json(out, "consistency.json", &report)?;
            write(out, "consistency_replicates.csv", &experiments::replicates_csv(&report.records, model.p()))?;
            println!(
                "mc-consistency: {} rmse ratio {:?}, max |bias|/se {:.3}",
                verdict(report.pass),
                report.rmse_ratio,
                report.max_bias_z
            );
            Ok(report.pass)
        }
        Command::McClt => {
            let mc = config.clt_config()?;
            let report = run_clt(&mc).map_err(run_err)?;
            write_json(out, "clt.json", &report)?;
            write(out, "clt_replicates.csv", &experiments::replicates_csv(&report.records, model.p()))?;
            write(out, "clt_qq.csv", &experiments::qq_csv(&report.records, &report.theta))?;
            println!(
                "mc-clt: {} mu-block relative Frobenius {:.4}, skewness {:?}, excess kurtosis {:?}",
                verdict(report.pass),
                report.mu_block_rel_frobenius,
                report.skewness,
                report.excess_kurtosis
            );
            Ok(report.pass)
        }
        Command::Coupling => {
            let section = config
                .coupling
                .clone()
                .ok_or_else(|| Failure::Config("missing \"coupling\" section".into()))?;
            let report =
                run_coupling(&model, section.other_start, section.horizon, config.step(), config.seed).map_err(run_err)?;
            write_json(out, "coupling.json", &report)?;
            println!("coupling: {} slope {:?} (alpha = {})", verdict(report.pass), report.slope, report.alpha);
            Ok(report.pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("i/o error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
