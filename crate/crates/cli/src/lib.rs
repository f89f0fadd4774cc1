//! Reproducible experiments on top of `sled-core`: config files, checkpoints
//! and JSON/CSV reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use sled_core::{AdapterMode, Objective};

pub use config::Config;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "sled", version, about = "Instruction sliders for a toy image editor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a config file with every default filled in.
    InitConfig {
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the base editor; writes the checkpoint, a manifest and the loss curve.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a slider adapter against a frozen base checkpoint.
    TrainAdapter {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: AdapterMode,
        #[arg(long, value_parser = parse_objective)]
        objective: Option<Objective>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Sweep slider values and report continuity, extrapolation and leakage.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        gamma: Option<usize>,
        /// Comma-separated slider values, e.g. `-0.5,0,1`.
        #[arg(long, allow_hyphen_values = true)]
        alphas: Option<String>,
        /// Also sweep explicit guidance with `w = 1 − α` (one slider only).
        #[arg(long)]
        with_cfg: bool,
        /// Directory for `sweep.json` and `sweep.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Interpolate one instruction's tokens toward the pad state.
    Interp {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Atom index of the single-instruction prompt.
        #[arg(long)]
        target: usize,
        #[arg(long, allow_hyphen_values = true)]
        betas: String,
        /// Directory for `interp.json` and `interp.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn parse_mode(s: &str) -> Result<AdapterMode, String> {
    s.parse().map_err(|e: sled_core::Error| e.to_string())
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: sled_core::Error| e.to_string())
}

/// Runs one command and returns a line for stdout.
pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::InitConfig { out, force } => {
            commands::init_config(&out, force)?;
            Ok(format!("wrote {}", out.display()))
        }
        Command::Pretrain { config, out, force } => {
            let s = commands::pretrain(&config, &out, force)?;
            Ok(format!("final loss {} after {} iterations", s.final_loss, s.iterations))
        }
        Command::TrainAdapter {
            config,
            base,
            mode,
            objective,
            out,
            force,
        } => {
            let s = commands::train_adapter_cmd(&config, &base, mode, objective, &out, force)?;
            Ok(format!(
                "held-out suppression loss {} (zero adapter {})",
                s.heldout_loss, s.baseline_heldout_loss
            ))
        }
        Command::Sweep {
            config,
            base,
            adapter,
            gamma,
            alphas,
            with_cfg,
            out,
            force,
        } => {
            let alphas = alphas.as_deref().map(output::parse_list).transpose()?;
            let report = commands::sweep(&commands::SweepArgs {
                config: &config,
                base: &base,
                adapter: &adapter,
                gamma,
                alphas,
                with_cfg,
                out: &out,
                force,
            })?;
            Ok(format!("{} runs written to {}", report.runs.len(), out.display()))
        }
        Command::Interp {
            config,
            base,
            target,
            betas,
            out,
            force,
        } => {
            let betas = output::parse_list(&betas)?;
            let report = commands::interp(&config, &base, target, &betas, &out, force)?;
            Ok(format!("{} entries written to {}", report.entries.len(), out.display()))
        }
    }
}
