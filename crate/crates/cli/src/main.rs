use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use scld::config::RawConfig;
use scld::report::{emit_report, write_report};
use scld::runner::{run_eval_only, run_experiment};

const PRESETS: &[(&str, &str)] = &[
    ("mw54", include_str!("../../../configs/mw54.toml")),
    ("gmm40_2d", include_str!("../../../configs/gmm40_2d.toml")),
    ("funnel", include_str!("../../../configs/funnel.toml")),
    ("robot1", include_str!("../../../configs/robot1.toml")),
    ("robot4", include_str!("../../../configs/robot4.toml")),
    ("gaussian", include_str!("../../../configs/gaussian.toml")),
];

/// Train and evaluate sequential controlled Langevin diffusion samplers.
#[derive(Parser, Debug)]
#[command(version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Configuration file (TOML).
    #[arg(long, conflicts_with = "task")]
    config: Option<PathBuf>,

    /// Named task; loads the shipped preset when there is one.
    #[arg(long)]
    task: Option<String>,

    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    output_dir: Option<PathBuf>,

    /// scld, scld_buffer, smc, cmcd_lv or cmcd_kl.
    #[arg(long)]
    algorithm: Option<String>,

    #[arg(long)]
    iterations: Option<u64>,

    /// Evaluate a saved checkpoint instead of training.
    #[arg(long, value_name = "CHECKPOINT")]
    eval_only: Option<PathBuf>,

    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a comparison table and plot series from metrics logs.
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        output_dir: PathBuf,
        /// Running-average window over evaluation events.
        #[arg(long, default_value_t = 5)]
        window: usize,
    },
    /// List the shipped presets.
    Presets,
}

fn raw_config(cli: &Cli) -> Result<RawConfig> {
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(RawConfig::parse(&text)?);
    }
    let Some(task) = &cli.task else {
        bail!("pass --config PATH or --task NAME");
    };
    match PRESETS.iter().find(|(name, _)| name == task) {
        Some((_, text)) => Ok(RawConfig::parse(text)?),
        None => Ok(RawConfig::parse(&format!("task = {task:?}\n"))?),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Some(Command::Report { logs, output_dir, window }) => {
            let report = emit_report(logs, *window)?;
            write_report(&report, output_dir)?;
            print!("{}", report.table);
            return Ok(());
        }
        Some(Command::Presets) => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
            return Ok(());
        }
        None => {}
    }
    if let Some(ck) = &cli.eval_only {
        let out = cli.output_dir.clone().unwrap_or_else(|| ck.parent().map_or_else(|| PathBuf::from("."), PathBuf::from));
        let record = run_eval_only(ck, &out)?;
        println!("{}", serde_json::to_string(&record)?);
        return Ok(());
    }
    let mut raw = raw_config(&cli)?;
    if let Some(a) = &cli.algorithm {
        raw.set_algorithm(a);
    }
    if let Some(i) = cli.iterations {
        raw.iterations = Some(i);
    }
    if let Some(s) = cli.seed {
        raw.seeds = Some(vec![s]);
    }
    if let Some(o) = &cli.output_dir {
        raw.output_dir = Some(o.display().to_string());
    }
    let cfg = raw.resolve()?;
    if cli.dry_run {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let summary = run_experiment(&cfg)?;
    print!("{}", summary.to_text());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
