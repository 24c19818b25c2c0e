use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use wgf_core::acceptance::Suite;
use wgf_core::distributions::{catalog_version, standard_toy_suite, CatalogEntry};
use wgf_lab::check::{check_criterion, criteria};
use wgf_lab::config::seed_override;
use wgf_lab::{run_experiment, CliError, ExperimentConfig, ExperimentKind, Result};

#[derive(Parser)]
#[command(name = "wgf-lab", version, about = "Toy Wasserstein gradient flow experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config, or with defaults when given an experiment name.
    Run {
        config: String,
        /// Overrides the config seed and WGF_LAB_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an acceptance suite: ot-core, velocity, flow, generator or all.
    Check {
        suite: String,
        /// Print the reports as a JSON array after the per-criterion lines.
        #[arg(long)]
        json: bool,
    },
    /// Print the toy distribution catalog as TOML.
    Catalog,
}

fn load(config: &str, seed: Option<u64>) -> Result<ExperimentConfig> {
    let seed = seed_override(seed)?;
    let path = Path::new(config);
    if !path.exists() {
        if let Ok(kind) = ExperimentKind::from_name(config) {
            let text = format!("experiment = \"{}\"\n", kind.name());
            return ExperimentConfig::resolve(&text, seed);
        }
    }
    ExperimentConfig::load(path, seed)
}

fn run(config: &str, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load(config, seed)?;
    if let Some(dir) = out {
        cfg.output_dir = dir;
    }
    let outcome = run_experiment(&cfg)?;
    println!("experiment {} (seed {})", cfg.experiment.name(), cfg.seed);
    for (name, value) in outcome.metrics.entries() {
        println!("  {name} = {value:.6}");
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn check(suite: &str, json: bool) -> Result<()> {
    let suite: Suite = suite.parse()?;
    let mut reports = Vec::new();
    for id in criteria(suite) {
        let r = check_criterion(id);
        println!("{r}");
        reports.push(r);
    }
    if json {
        let text = serde_json::to_string_pretty(&reports).map_err(|e| CliError::Parse(e.to_string()))?;
        println!("{text}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::CheckFailed {
            failed,
            total: reports.len(),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct CatalogFile {
    version: u32,
    entry: Vec<CatalogEntry>,
}

fn catalog() -> Result<()> {
    let file = CatalogFile {
        version: catalog_version(),
        entry: standard_toy_suite(),
    };
    let text = toml::to_string(&file).map_err(|e| CliError::Parse(e.to_string()))?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => run(&config, seed, out),
        Command::Check { suite, json } => check(&suite, json),
        Command::Catalog => catalog(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
