//! `hald`: experiment driver for the soft-hard-soft training lab.
//!
//! Exit codes: 0 success, 1 usage, 2 IO or config, 3 failed verification.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Io(String),
    Verify(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Verify(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "error: {m}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "hald", version, about = "Soft-hard-soft soft-label training lab")]
struct Cli {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Create the output directory if missing.
    #[arg(long, global = true)]
    create: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test corpus.
    GenData,
    /// Train the teacher on the training split.
    TrainTeacher,
    /// Build the crop-level soft-label pool from the teacher.
    GenLabels,
    /// Train a student (trainer = hald | soft_only | joint | variant:<order>).
    Train,
    /// Drift, crop-consistency and alignment reports for a checkpoint.
    Diagnose,
    /// Monte-Carlo checks of the probability bounds.
    VerifyTheory {
        /// all | lemma1 | thm1 | thm2 | thm3 | cor1
        selector: Option<String>,
    },
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &cli.set {
        cfg.apply_override(kv)?;
    }
    if let Some(out) = &cli.out {
        cfg.set("out", &out.to_string_lossy())?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if cli.create {
        cfg.set("create_out", "true")?;
    }
    if let Command::VerifyTheory { selector: Some(s) } = &cli.command {
        cfg.set("selector", s)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::TrainTeacher => commands::train_teacher_cmd(&cfg),
        Command::GenLabels => commands::gen_labels(&cfg),
        Command::Train => commands::train_cmd(&cfg),
        Command::Diagnose => commands::diagnose(&cfg),
        Command::VerifyTheory { .. } => commands::verify_theory(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
