//! Command-line front end: `fairfpr generate|train|evaluate|sweep|replay`.
//!
//! Exit codes: 0 success, 1 replay hash mismatch, 2 config or parse error,
//! 3 divergence, 4 incompatible inputs, 5 partial sweep failure.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use commands::{SplitChoice, SweepAxis};
use config::{GenerateConfig, RunConfig};

pub const EXIT_MISMATCH: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_INCOMPATIBLE: u8 = 4;
pub const EXIT_PARTIAL: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "fairfpr", version, about = "Instance-FPR penalty training and fairness evaluation on synthetic face-like data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic grouped dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train an encoder and classifier on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset base path, one of its files, or a directory holding `dataset.*`.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Score a checkpoint: report.json plus per-group ROC CSVs.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint base path, one of its files, or a train run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated overall FPR levels; overrides the config.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value_t = SplitChoice::Eval)]
        split: SplitChoice,
    },
    /// Train and evaluate once per value of one loss parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Re-run a recorded manifest and compare output hashes.
    Replay {
        /// `manifest.json` or the run directory holding it.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; defaults apply to anything it leaves out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to `runs/<timestamp>-<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Diverged { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
        Error::Incompatible(_) | Error::DimensionMismatch { .. } => EXIT_INCOMPATIBLE,
        _ => EXIT_CONFIG,
    }
}

/// `runs/<timestamp>-<tag>`, suffixed if that directory already exists.
pub fn default_out_dir(tag: &str) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = PathBuf::from("runs").join(format!("{stamp}-{tag}"));
    let mut dir = base.clone();
    let mut n = 2;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    dir
}

fn run_config(common: &Common, gammas: Option<Vec<f64>>) -> crate::Result<RunConfig> {
    let mut cfg: RunConfig = config::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(g) = gammas {
        cfg.gammas = g;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, tag: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| default_out_dir(tag))
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code(err))
}

fn report_divergence(err: &Error, dir: &Path) {
    if matches!(err, Error::Diverged { .. }) {
        match commands::last_telemetry_line(dir) {
            Some(line) => eprintln!("last telemetry record: {line}"),
            None => eprintln!("no telemetry record was written before divergence"),
        }
    }
}

pub fn run(cli: Cli) -> ExitCode {
    match cli.command {
        Command::Generate { common } => {
            let cfg = config::load::<GenerateConfig>(common.config.as_deref()).map(|mut c| {
                if let Some(seed) = common.seed {
                    c.seed = seed;
                }
                c
            });
            let out = out_dir(&common, "generate");
            match cfg.and_then(|c| commands::generate(&c, &out)) {
                Ok(_) => {
                    println!("{}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Train { common, dataset } => {
            let out = out_dir(&common, "train");
            match run_config(&common, None).and_then(|c| commands::train(&dataset, &c, &out)) {
                Ok(_) => {
                    println!("{}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    report_divergence(&e, &out);
                    fail(&e)
                }
            }
        }
        Command::Evaluate {
            common,
            checkpoint,
            dataset,
            gammas,
            split,
        } => {
            let out = out_dir(&common, "evaluate");
            match run_config(&common, gammas).and_then(|c| commands::evaluate(&checkpoint, &dataset, &c, split, &out)) {
                Ok((_, report)) => {
                    for op in &report.operating_points {
                        println!("gamma {:e}: threshold {:.6} bias degree {:.6}", op.gamma, op.threshold, op.bias_degree);
                    }
                    println!("mean accuracy {:.4} (std {:.4})", report.mean_accuracy, report.accuracy_std);
                    println!("{}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Sweep {
            common,
            dataset,
            axis,
            values,
            gammas,
        } => {
            let out = out_dir(&common, "sweep");
            match run_config(&common, gammas).and_then(|c| commands::sweep(&dataset, &c, axis, &values, &out)) {
                Ok(outcome) if outcome.failures.is_empty() => {
                    println!("{}", out.join(commands::SUMMARY_FILE).display());
                    ExitCode::SUCCESS
                }
                Ok(outcome) => {
                    for f in &outcome.failures {
                        eprintln!("child run failed: {f}");
                    }
                    ExitCode::from(EXIT_PARTIAL)
                }
                Err(e) => fail(&e),
            }
        }
        Command::Replay { manifest: path, out } => {
            let m = match manifest::read(&path) {
                Ok(m) => m,
                Err(e) => return fail(&e),
            };
            let out = out.unwrap_or_else(|| default_out_dir(&format!("replay-{}", m.command)));
            match commands::replay(&m, &out) {
                Ok(mismatched) if mismatched.is_empty() => {
                    println!("{}: all {} output hashes match", out.display(), m.outputs.len());
                    ExitCode::SUCCESS
                }
                Ok(mismatched) => {
                    for f in &mismatched {
                        eprintln!("hash mismatch: {f}");
                    }
                    ExitCode::from(EXIT_MISMATCH)
                }
                Err(e) => {
                    report_divergence(&e, &out);
                    fail(&e)
                }
            }
        }
    }
}
