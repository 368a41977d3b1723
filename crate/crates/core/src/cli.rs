//! Command-line front end: `run`, `sweep`, `verify`, `dump-data`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::baselines::{PatternStrategy, RatioRule};
use crate::config::Config;
use crate::error::{FlpsError, Result};
use crate::metrics::{MetricsRow, CSV_HEADER};
use crate::orchestrator::{build_federation, Simulation};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Environment variable naming the output root (default `out`).
pub const OUT_ENV: &str = "FEDLPS_OUT";

#[derive(Debug, Parser)]
#[command(name = "fedlps", version, about = "Federated learning with learnable sparsity and bandit-chosen sparse ratios")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation and write metrics, manifest and checkpoints.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run a base config once per axis value and write a combined CSV.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values; each axis has a default list.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Option<Vec<String>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the built-in correctness checks.
    Verify,
    /// Write every client's train/test split as CSV.
    DumpData {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// Fixed sparse ratio shared by all clients.
    Ratio,
    /// Pattern strategy at a fixed ratio of 0.5.
    Pattern,
    /// Capability level set: low, median or high.
    Heterogeneity,
    /// Classes per client.
    Noniid,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Ratio => "ratio",
            Axis::Pattern => "pattern",
            Axis::Heterogeneity => "heterogeneity",
            Axis::Noniid => "noniid",
        }
    }

    fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Ratio => &["0.2", "0.4", "0.6", "0.8"],
            Axis::Pattern => &["learnable", "random", "ordered", "magnitude"],
            Axis::Heterogeneity => &["low", "median", "high"],
            Axis::Noniid => &["2", "4", "8"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

/// Capability levels for a named heterogeneity setting.
pub fn heterogeneity_levels(name: &str) -> Result<Vec<f64>> {
    match name {
        "low" => Ok(vec![1.0, 0.5]),
        "median" => Ok(vec![1.0, 0.5, 0.25]),
        "high" => Ok(vec![1.0, 0.5, 0.25, 0.125, 0.0625]),
        other => Err(FlpsError::config(format!("unknown heterogeneity level {other:?} (low, median, high)"))),
    }
}

/// The base config with one axis value applied.
pub fn apply_axis(base: &Config, axis: Axis, value: &str) -> Result<Config> {
    let mut cfg = base.clone();
    let parse_f = |v: &str| v.parse::<f64>().map_err(|_| FlpsError::config(format!("bad {} value {v:?}", axis.name())));
    match axis {
        Axis::Ratio => {
            cfg.ratio_rule = RatioRule::Fixed;
            cfg.fixed_ratio = parse_f(value)?;
        }
        Axis::Pattern => {
            cfg.pattern = PatternStrategy::parse(value)?;
            cfg.ratio_rule = RatioRule::Fixed;
            cfg.fixed_ratio = 0.5;
        }
        Axis::Heterogeneity => cfg.capability_levels = heterogeneity_levels(value)?,
        Axis::Noniid => {
            cfg.classes_per_client = value.parse().map_err(|_| FlpsError::config(format!("bad noniid value {value:?}")))?;
        }
    }
    cfg.name = format!("{}_{}_{}", base.name, axis.name(), value);
    cfg.validate()?;
    Ok(cfg)
}

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

fn load(path: &Path, seed: Option<u64>, threads: Option<usize>) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

/// Run to completion, write outputs under `out_root()/<name>` and return the
/// final metrics row.
pub fn run_config(cfg: Config) -> Result<MetricsRow> {
    let dir = out_root().join(&cfg.name);
    fs::create_dir_all(&dir).map_err(|e| FlpsError::io(&dir, e))?;
    let mut sim = Simulation::new(cfg)?.with_checkpoint_dir(&dir);
    sim.run()?;
    sim.write_outputs(&dir)?;
    sim.metrics().last().copied().ok_or_else(|| FlpsError::config("rounds = 0: nothing to report"))
}

pub fn cmd_run(path: &Path, seed: Option<u64>, threads: Option<usize>) -> Result<i32> {
    let cfg = load(path, seed, threads)?;
    let name = cfg.name.clone();
    let last = run_config(cfg)?;
    println!(
        "{name}: final mean accuracy {:.2}%, cumulative FLOPs {:.4e}, simulated time {:.4}s",
        last.mean_test_acc, last.cumulative_flops, last.cumulative_sim_time
    );
    Ok(EXIT_OK)
}

pub fn cmd_sweep(path: &Path, axis: Axis, values: Option<Vec<String>>, seed: Option<u64>, threads: Option<usize>) -> Result<i32> {
    let base = load(path, seed, threads)?;
    let values = values.unwrap_or_else(|| axis.default_values());
    if values.is_empty() {
        return Err(FlpsError::config("sweep needs at least one axis value"));
    }
    let configs = values.iter().map(|v| apply_axis(&base, axis, v)).collect::<Result<Vec<_>>>()?;
    let mut combined = format!("# fedlps-sweep v1\naxis,value,{CSV_HEADER}\n");
    for (value, cfg) in values.iter().zip(configs) {
        let dir = out_root().join(&cfg.name);
        let last = run_config(cfg)?;
        let csv = fs::read_to_string(dir.join("metrics.csv")).map_err(|e| FlpsError::io(&dir, e))?;
        for line in csv.lines().skip(2) {
            combined.push_str(&format!("{},{value},{line}\n", axis.name()));
        }
        println!("{}={value}: final mean accuracy {:.2}%, cumulative FLOPs {:.4e}", axis.name(), last.mean_test_acc, last.cumulative_flops);
    }
    let dir = out_root().join(format!("{}_sweep_{}", base.name, axis.name()));
    fs::create_dir_all(&dir).map_err(|e| FlpsError::io(&dir, e))?;
    let file = dir.join("sweep.csv");
    fs::write(&file, combined).map_err(|e| FlpsError::io(&file, e))?;
    println!("combined CSV: {}", file.display());
    Ok(EXIT_OK)
}

pub fn cmd_verify() -> Result<i32> {
    let results = verify::run_all();
    print!("{}", verify::format_table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(EXIT_CHECK_FAILED)
    }
}

pub fn cmd_dump_data(path: &Path, seed: Option<u64>) -> Result<i32> {
    let cfg = load(path, seed, None)?;
    let fed = build_federation(&cfg)?;
    let dir = out_root().join(&cfg.name).join("data");
    fs::create_dir_all(&dir).map_err(|e| FlpsError::io(&dir, e))?;
    for (k, d) in fed.data.iter().enumerate() {
        d.train.write_csv(&dir.join(format!("client_{k}_train.csv")))?;
        d.test.write_csv(&dir.join(format!("client_{k}_test.csv")))?;
        println!("client {k}: capability {} classes {:?} train {} test {}", fed.capabilities[k], fed.classes[k], d.train.len(), d.test.len());
    }
    Ok(EXIT_OK)
}

/// Dispatch a parsed command line and map errors to exit codes.
pub fn execute(cli: Cli) -> i32 {
    let res = match cli.command {
        Command::Run { config, seed, threads } => cmd_run(&config, seed, threads),
        Command::Sweep { config, axis, values, seed, threads } => cmd_sweep(&config, axis, values, seed, threads),
        Command::Verify => cmd_verify(),
        Command::DumpData { config, seed } => cmd_dump_data(&config, seed),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                FlpsError::NonFinite { .. } | FlpsError::Structural(_) => EXIT_CHECK_FAILED,
                _ => EXIT_CONFIG,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heterogeneity_sets() {
        assert_eq!(heterogeneity_levels("low").unwrap(), vec![1.0, 0.5]);
        assert_eq!(heterogeneity_levels("median").unwrap(), vec![1.0, 0.5, 0.25]);
        assert_eq!(heterogeneity_levels("high").unwrap().len(), 5);
        assert!(heterogeneity_levels("extreme").is_err());
    }

    #[test]
    fn pattern_axis_pins_ratio() {
        let base = Config::default();
        let c = apply_axis(&base, Axis::Pattern, "random").unwrap();
        assert_eq!(c.pattern, PatternStrategy::Random);
        assert_eq!(c.ratio_rule, RatioRule::Fixed);
        assert_eq!(c.fixed_ratio, 0.5);
        assert_eq!(c.name, "run_pattern_random");
        assert!(apply_axis(&base, Axis::Ratio, "abc").is_err());
        assert!(apply_axis(&base, Axis::Ratio, "1.5").is_err());
    }

    #[test]
    fn parses_commands() {
        let cli = Cli::try_parse_from(["fedlps", "sweep", "c.toml", "--axis", "noniid", "--values", "2,4"]).unwrap();
        match cli.command {
            Command::Sweep { axis, values, .. } => {
                assert_eq!(axis, Axis::Noniid);
                assert_eq!(values.unwrap(), vec!["2", "4"]);
            }
            _ => panic!("wrong command"),
        }
        assert!(Cli::try_parse_from(["fedlps", "sweep", "c.toml", "--axis", "bogus"]).is_err());
    }
}
