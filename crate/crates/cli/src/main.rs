//! Command-line front end: config-driven experiment runs, gradient checks,
//! the head-finetuning study, the component ablation grid, convergence
//! plots and parameter accounting.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use fraug_core::config::{ExperimentConfig, Precision};
use fraug_core::federation::communication_report;
use fraug_core::harness::{ablation, head_study, model_specs, run_experiment};
use fraug_core::metrics::parse_metrics_file;
use fraug_core::plot::{accuracy_series, write_plot};

#[derive(Parser)]
#[command(name = "fraug", version, about = "Federated representation-augmentation simulator")]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Replace the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (runs) or output file (plot).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Numeric precision override.
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,

    /// Strategy override (fraug, fedavg, fedbn, fedprox, single, all,
    /// noise-uniform, noise-laplace, noise-gauss).
    #[arg(long, global = true)]
    strategy: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment over all seeds.
    Run,
    /// Finite-difference checks of every layer and loss term.
    Gradcheck,
    /// Scarce-training vs head-finetuning comparison per domain.
    Headstudy,
    /// Component ablation grid (four toggle rows).
    Ablation,
    /// Render average-accuracy-per-round curves from metrics files.
    Plot {
        /// Metrics files; each file becomes one curve unless it carries a
        /// strategy column.
        metrics: Vec<PathBuf>,
    },
    /// Parameter and MAC accounting for the configured model sizes.
    Paramcount,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    let env: Vec<(String, String)> = std::env::vars().collect();
    cfg.apply_env_overrides(&env)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(precision) = &cli.precision {
        cfg.precision = match precision.as_str() {
            "f64" => Precision::F64,
            _ => Precision::F32,
        };
    }
    if let Some(strategy) = &cli.strategy {
        cfg.strategy = strategy.clone();
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn strategy_tag_for(path: &Path, embedded: &[Option<String>]) -> Option<String> {
    if let Some(tag) = embedded.iter().flatten().next() {
        return Some(tag.clone());
    }
    // Sibling summary.json written by `run` carries the strategy name.
    let summary = path.parent()?.join("summary.json");
    let text = std::fs::read_to_string(summary).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    value.get("strategy")?.as_str().map(str::to_string)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run => {
            let cfg = load_config(&cli)?;
            let out_dir = PathBuf::from(&cfg.out_dir);
            let output = run_experiment(&cfg, Some(&out_dir)).context("experiment failed")?;
            println!("strategy: {}", output.strategy);
            println!("seeds: {:?}", output.summary.seeds);
            println!("final round: {}", output.summary.final_round);
            for (domain, acc) in &output.summary.per_domain {
                println!("  {domain}: {:.2} ±{:.2}", acc.mean, acc.std);
            }
            println!(
                "  average: {:.2} ±{:.2}",
                output.summary.average.mean, output.summary.average.std
            );
            println!("artifacts in {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck => {
            let report = fraug_core::gradcheck::run_full()?;
            println!("{report}");
            if report.passed() {
                println!("all components within tolerance");
                Ok(ExitCode::SUCCESS)
            } else {
                let names: Vec<&str> = report
                    .failed_components()
                    .iter()
                    .map(|c| c.name.as_str())
                    .collect();
                eprintln!("gradient check failed: {}", names.join(", "));
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Headstudy => {
            let cfg = load_config(&cli)?;
            let report = head_study(&cfg)?;
            println!("{report}");
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                let json = serde_json::to_string_pretty(&report)?;
                std::fs::write(out.join("headstudy.json"), json + "\n")?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablation => {
            let cfg = load_config(&cli)?;
            let out_dir = cli.out.clone().or_else(|| Some(PathBuf::from(&cfg.out_dir)));
            let report = ablation(&cfg, out_dir.as_deref())?;
            println!("{report}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { metrics } => {
            if metrics.is_empty() {
                bail!("plot requires at least one metrics file");
            }
            let out = cli
                .out
                .clone()
                .ok_or_else(|| anyhow::anyhow!("plot requires --out <svg path>"))?;
            let mut rows = Vec::new();
            let mut tags = Vec::new();
            for path in metrics {
                let (file_rows, embedded) = parse_metrics_file(path)?;
                let tag = strategy_tag_for(path, &embedded).unwrap_or_else(|| {
                    path.file_stem()
                        .map(|s| s.to_string_lossy().to_string())
                        .unwrap_or_else(|| "run".into())
                });
                for (row, embedded_tag) in file_rows.into_iter().zip(embedded) {
                    tags.push(Some(embedded_tag.unwrap_or_else(|| tag.clone())));
                    rows.push(row);
                }
            }
            let series = accuracy_series(&rows, &tags)?;
            write_plot(&series, &out)?;
            println!(
                "wrote {} and {}",
                out.display(),
                out.with_extension("svg.csv").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Paramcount => {
            let cfg = load_config(&cli)?;
            let report = communication_report(&model_specs(&cfg))?;
            print!("{report}");
            let combined = report.generator_ratio + report.rtnet_ratio;
            if combined <= 0.05 {
                println!("overhead check: combined ratio {combined:.4} <= 0.05");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("overhead check failed: combined ratio {combined:.4} > 0.05");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
