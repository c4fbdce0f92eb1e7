//! `ividr`: batch experiments for the IViDR recommender.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use ividr_core::recmodel::Variant;

use config::{parse_sweep, ExperimentConfig, Preset};
use rundir::{RunDir, BUILD_ID};

#[derive(Parser, Debug)]
#[command(name = "ividr", version = BUILD_ID, about = "Instrumental-variable debiasing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file overlaid on the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Comma-separated seeds; replaces the config's list.
    #[arg(long = "seeds", alias = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Root under which the timestamped run directory is created.
    #[arg(long, env = "IVIDR_OUT", default_value = "runs")]
    out: PathBuf,
    /// Continue an interrupted run in this directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset bundle.
    Generate(Common),
    /// Train and evaluate the configured variants.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant names, e.g. `MF,IViDR`.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Sweep one fusion weight, e.g. `rho=0:1:0.2`.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Confounder recovery (MCC) across exposure-noise levels.
    MccStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        gammas: Vec<f64>,
    },
    /// All six variants with an ordering check.
    Ablate(Common),
    /// Both fusion weights over the configured grid.
    Sweep(Common),
}

fn open(name: &str, common: &Common, edit: impl FnOnce(&mut ExperimentConfig) -> Result<()>) -> Result<RunDir> {
    if let Some(root) = &common.resume {
        log::info!("resuming {}", root.display());
        return RunDir::resume(root, name);
    }
    let mut cfg = ExperimentConfig::load(common.preset, common.config.as_deref())?;
    if !common.seeds.is_empty() {
        cfg.seeds = common.seeds.clone();
    }
    edit(&mut cfg)?;
    cfg.validate()?;
    let dir = RunDir::create(&common.out, name, cfg)?;
    log::info!("run directory {}", dir.root.display());
    Ok(dir)
}

fn dispatch(cli: Cli) -> Result<usize> {
    match cli.command {
        Command::Generate(c) => {
            let dir = open("generate", &c, |_| Ok(()))?;
            commands::cmd_generate(&dir, c.seeds.first().copied())?;
            Ok(0)
        }
        Command::Run { common, variants, sweep } => {
            let sweep = sweep.as_deref().map(parse_sweep).transpose()?;
            let dir = open("run", &common, |cfg| {
                if !variants.is_empty() {
                    cfg.variants = variants.iter().map(|v| Variant::parse(v)).collect::<Result<_, _>>()?;
                }
                Ok(())
            })?;
            commands::cmd_run(&dir, sweep.as_ref(), common.jobs)
        }
        Command::MccStudy { common, gammas } => {
            let dir = open("mcc-study", &common, |cfg| {
                if !gammas.is_empty() {
                    cfg.gammas = gammas.clone();
                }
                if cfg.gammas.is_empty() {
                    bail!("no gamma values");
                }
                Ok(())
            })?;
            commands::cmd_mcc_study(&dir, common.jobs)
        }
        Command::Ablate(c) => {
            let dir = open("ablate", &c, |_| Ok(()))?;
            commands::cmd_ablate(&dir, c.jobs)
        }
        Command::Sweep(c) => {
            let dir = open("sweep", &c, |_| Ok(()))?;
            commands::cmd_sweep(&dir, c.jobs)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            log::error!("{n} cell(s) failed");
            ExitCode::from(1)
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}
