use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use evopu::pipeline::{
    load_config, run_eval_checkpoint, run_experiment, run_generate, run_simulation, run_sweep, run_train, LoadedConfig,
    SweepParameter,
};

/// Evolution-aware positive-unlabeled learning for protein motifs.
#[derive(Debug, Parser)]
#[command(name = "evopu", version)]
struct Cli {
    /// Experiment TOML (a simulation TOML for `simulate`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the candidate set and write candidates.csv and counts.json.
    Generate,
    /// Fit the configured method and write the checkpoint and trace.
    Train,
    /// Score the test set; fits first unless a checkpoint is given.
    Eval {
        /// model.json written by `train`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the generative simulator and write observed.csv and test.csv.
    Simulate,
    /// Repeat a run over values of one parameter.
    Sweep {
        /// lambda, T, epsilon or encoder.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
}

fn config_path(cli: &Cli) -> Result<&Path> {
    cli.config.as_deref().context("--config is required")
}

fn load(cli: &Cli) -> Result<LoadedConfig> {
    let path = config_path(cli)?;
    let mut loaded = load_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = cli.seed {
        loaded.config.seed = s;
        loaded.config.training.seed = s;
    }
    if let Some(out) = &cli.out {
        loaded.config.output_dir = out.clone();
    }
    Ok(loaded)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate => {
            let loaded = load(cli)?;
            let c = run_generate(&loaded.config)?;
            println!(
                "observed {} nucleotide / {} amino-acid; candidates {} nucleotide / {} amino-acid",
                c.observed_nuc, c.observed_aa, c.candidate_nuc, c.candidate_aa
            );
        }
        Command::Train => {
            let loaded = load(cli)?;
            let out = run_train(&loaded.config)?;
            for n in &out.notes {
                println!("{n}");
            }
            println!("model written to {}", loaded.config.output_dir.join("model.json").display());
        }
        Command::Eval { model } => {
            let loaded = load(cli)?;
            let row = match model {
                Some(m) => run_eval_checkpoint(&loaded.config, m)?,
                None => run_experiment(&loaded)?.metrics,
            };
            println!("{}", row.fields().join(","));
        }
        Command::Simulate => {
            let path = config_path(cli)?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let n = run_simulation(&text, cli.seed, &dir)?;
            println!("{n} observed nucleotide sequences written to {}", dir.display());
        }
        Command::Sweep { param, values } => {
            let loaded = load(cli)?;
            let param: SweepParameter = param.parse()?;
            let records = run_sweep(&loaded, param, values)?;
            println!("{} runs; summary in {}", records.len(), loaded.config.output_dir.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
