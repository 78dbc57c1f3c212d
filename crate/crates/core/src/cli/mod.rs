// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `crl` command line.

mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{load_task, Analysis, Task};
pub use config::{load_config, parse_config, Mode, RunConfig, SaeConfig, SaeSource, TaskConfig, TaskSource};
pub use manifest::{FileEntry, RunManifest, RunStatus, MANIFEST};

use crate::diagnostics::BaselineKind;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "crl", version, about = "Learned SAE-feature steering of a frozen toy transformer")]
pub struct Cli {
    /// TOML run configuration; omitted means all defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set ppo.max_steps=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output root; each command writes to `<root>/<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the planted task and its SAE and write them out.
    Plant,
    /// Calibrate the steering coefficient on correct baseline samples.
    Calibrate,
    /// Train the policy and critic with PPO.
    Train,
    /// Greedy evaluation of a trained policy on the held-out set.
    Eval {
        /// Defaults to `<root>/train/checkpoints/best.crla`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Brute-force flipping sets for every context.
    Oracle,
    /// Heuristic steering: none, random, most-active or constrained.
    Baseline {
        #[arg(value_parser = ["none", "random", "most-active", "constrained"])]
        kind: String,
        /// Select from all features instead of the AFM mask.
        #[arg(long)]
        no_afm: bool,
    },
    /// Short training runs over a layer x coefficient grid.
    Sweep {
        /// Comma-separated; defaults to the configured steering layers.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        coefficients: Vec<f64>,
    },
    /// Interpretability reports for a trained policy.
    Analyze {
        #[arg(value_enum)]
        what: Analysis,
        /// Defaults to `<root>/train/checkpoints/best.crla`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Mean residual norm per layer over the training prompts.
    Norms,
    /// Wall-clock cost of steered against unsteered generation.
    Overhead {
        /// Policy to time; without one the most-active heuristic is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn dir_name(&self) -> Result<String> {
        Ok(match self {
            Command::Plant => "plant".into(),
            Command::Calibrate => "calibrate".into(),
            Command::Train => "train".into(),
            Command::Eval { .. } => "eval".into(),
            Command::Oracle => "oracle".into(),
            Command::Baseline { kind, no_afm } => {
                let k: BaselineKind = kind.parse()?;
                format!("baseline-{}{}", k.as_str(), if *no_afm { "-no-afm" } else { "" })
            }
            Command::Sweep { .. } => "sweep".into(),
            Command::Analyze { what, .. } => format!("analyze-{}", clap::ValueEnum::to_possible_value(what).expect("named").get_name()),
            Command::Norms => "norms".into(),
            Command::Overhead { .. } => "overhead".into(),
        })
    }
}

fn error_record(kind: &str, message: &str, code: i32) {
    let rec = serde_json::json!({ "error": kind, "message": message, "exit_code": code });
    eprintln!("{rec}");
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.set)?;
    let hash = RunConfig { output_dir: None, ..cfg.clone() }.hash();
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    let root = cfg.output_root();
    let dir = root.join(cli.command.dir_name()?);
    let manifest = RunManifest::open(&dir, &cli.command.dir_name()?, hash, cfg.seed)?;
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;
    let mut ctx = commands::Ctx {
        cfg,
        root,
        dir: dir.clone(),
        hash,
        coefficient: None,
        calibration_mode: None,
    };
    let outcome = match &cli.command {
        Command::Plant => commands::plant(&mut ctx),
        Command::Calibrate => commands::calibrate(&mut ctx),
        Command::Train => commands::train_cmd(&mut ctx),
        Command::Eval { checkpoint } => commands::eval(&mut ctx, checkpoint.as_deref()),
        Command::Oracle => commands::oracle(&mut ctx),
        Command::Baseline { kind, no_afm } => commands::baseline(&mut ctx, kind.parse()?, *no_afm),
        Command::Sweep { layers, coefficients } => commands::sweep_cmd(&mut ctx, layers, coefficients),
        Command::Analyze { what, checkpoint } => commands::analyze(&mut ctx, *what, checkpoint.as_deref()),
        Command::Norms => commands::norms(&mut ctx),
        Command::Overhead { checkpoint } => commands::overhead(&mut ctx, checkpoint.as_deref()),
    };
    let manifest = RunManifest {
        coefficient: ctx.coefficient,
        calibration_mode: ctx.calibration_mode.clone(),
        ..manifest
    };
    manifest.seal(&dir, &outcome)?;
    outcome
}

/// Parses `argv`, runs the command and returns the process exit code. Errors
/// go to stderr as one JSON object.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            error_record("usage", e.to_string().trim(), 2);
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            error_record(e.kind(), &e.to_string(), code);
            code
        }
    }
}
