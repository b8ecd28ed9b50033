use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use harness::{run, ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(name = "scaleadv", about = "Image-scaling attacks and defenses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or adversarially train) the classifier and report clean accuracy
    Train(Common),
    /// Craft image-scaling attacks and score them with the detectors
    AttackScale(Common),
    /// Vanilla vs joint white-box attacks over a perturbation grid
    AttackWhite(Common),
    /// Black-box HSJ attacks over a query-budget grid
    AttackBlack(Common),
    /// Detection scores for black-box and scaling attacks
    Detect(Common),
    /// White-box attacks against the area scaler
    Robust(Common),
    /// Rebuild summary.csv and figures from an existing rows.csv
    Report(Common),
    /// Transfer evaluation against a remote classifier
    RemoteEval(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scaler: Option<String>,
    #[arg(long)]
    beta: Option<usize>,
    /// Comma-separated defenses: none, median, randomized
    #[arg(long)]
    defense: Option<String>,
    #[arg(long)]
    budget_grid: Option<String>,
    #[arg(long)]
    eps_grid: Option<String>,
    #[arg(long)]
    kappa_grid: Option<String>,
    /// Extra `key=value` overrides
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn build(kind: ExperimentKind, c: &Common) -> harness::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::from_file(kind, path)?,
        None => ExperimentConfig::defaults(kind),
    };
    let flags = [
        ("seed", c.seed.map(|v| v.to_string())),
        ("out", c.out.as_ref().map(|p| p.display().to_string())),
        ("scaler", c.scaler.clone()),
        ("beta", c.beta.map(|v| v.to_string())),
        ("defense", c.defense.clone()),
        ("budget_grid", c.budget_grid.clone()),
        ("eps_grid", c.eps_grid.clone()),
        ("kappa_grid", c.kappa_grid.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v).map_err(|m| harness::Error::Invalid(format!("--{}: {m}", key.replace('_', "-"))))?;
        }
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| harness::Error::Invalid(format!("override `{kv}` is not key=value")))?;
        cfg.set(k.trim(), v.trim()).map_err(|m| harness::Error::Invalid(format!("{kv}: {m}")))?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = match &cli.command {
        Command::Train(c) => (ExperimentKind::Train, c),
        Command::AttackScale(c) => (ExperimentKind::ScaleAttack, c),
        Command::AttackWhite(c) => (ExperimentKind::Whitebox, c),
        Command::AttackBlack(c) => (ExperimentKind::Blackbox, c),
        Command::Detect(c) => (ExperimentKind::Detect, c),
        Command::Robust(c) => (ExperimentKind::Robust, c),
        Command::Report(c) => (ExperimentKind::Report, c),
        Command::RemoteEval(c) => (ExperimentKind::RemoteEval, c),
    };
    let result = build(kind, common).and_then(|cfg| run(&cfg));
    match result {
        Ok(out) => {
            println!("{} rows, {} figures in {}", out.rows.len(), out.figures.len(), out.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
