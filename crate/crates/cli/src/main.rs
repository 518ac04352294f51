use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use semsplit::env::Scheme;
use semsplit::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "semsplit", version, about = "Semantic-splitting multiple access experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every grid cell and evaluate the final policies.
    Train(Common),
    /// Re-evaluate checkpoints written by `train`.
    Evaluate(Common),
    /// Train across the power grid and aggregate SES and BER over seeds.
    SweepPower(Common),
    /// Sweep an injected bit error rate with the semantic budget held fixed.
    SweepBer(Common),
    /// Train all four schemes on paired channels and compare them.
    CompareSchemes(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

struct ConfigError(String);

fn load(c: &Common) -> std::result::Result<(ExperimentConfig, PathBuf), ConfigError> {
    let mut cfg = ExperimentConfig::from_path(&c.config).map_err(|e| ConfigError(e.to_string()))?;
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| ConfigError("no output directory: pass --out or set output_dir".into()))?;
    Ok((cfg, out))
}

fn save_resolved(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let text = cfg.to_toml_string()?;
    std::fs::write(out.join("config.resolved.toml"), text)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    let (common, kind) = match command {
        Command::Train(c) => (c, "train"),
        Command::Evaluate(c) => (c, "evaluate"),
        Command::SweepPower(c) => (c, "sweep-power"),
        Command::SweepBer(c) => (c, "sweep-ber"),
        Command::CompareSchemes(c) => (c, "compare-schemes"),
    };
    let (mut cfg, out) = load(&common).map_err(|ConfigError(m)| semsplit::Error::Config(m))?;
    if kind == "compare-schemes" {
        cfg.schemes = Scheme::ALL.to_vec();
    }
    save_resolved(&cfg, &out).with_context(|| format!("writing to {}", out.display()))?;
    let n_users = cfg.env.n_users;
    match kind {
        "train" => {
            let reports = experiment::run_experiment(&cfg, &out)?;
            eprintln!("trained {} cells into {}", reports.len(), out.display());
        }
        "evaluate" => {
            let reports = experiment::run_evaluation(&cfg, &out)?;
            eprintln!("evaluated {} checkpoints", reports.len());
        }
        "sweep-power" => {
            let reports = experiment::run_experiment(&cfg, &out)?;
            let points = experiment::aggregate_power(&reports, n_users);
            experiment::write_power_sweep(&out.join("power_sweep.csv"), &points, n_users)?;
            eprintln!("wrote {} power points", points.len());
        }
        "sweep-ber" => {
            let points = experiment::run_ber_sweep(&cfg, &out)?;
            eprintln!("wrote {} BER points", points.len());
        }
        _ => {
            let reports = experiment::run_experiment(&cfg, &out)?;
            experiment::write_scheme_comparison(&out.join("scheme_comparison.csv"), &reports)?;
            eprintln!("compared {} cells", reports.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .downcast_ref::<semsplit::Error>()
                .is_some_and(semsplit::Error::is_config);
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
