//! Batch pipeline: data generation, labelling, training, evaluation,
//! contingency planning and static figures.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
//! Errors are printed to stderr as one JSON object.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{RunConfig, SEED_ENV};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mmntp", version, about = "Multimodal manoeuvre and trajectory prediction pipeline")]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides the file and MMNTP_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override one key, e.g. `--set train.epochs=5`. Applied last, in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes and balanced train/test windows.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Auto-label the tracks of a recording.
    Label {
        /// Track CSV (highD-style columns).
        #[arg(long)]
        input: PathBuf,
        /// Recording metadata; defaults to `<name>_meta.json` next to the CSV.
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Output CSV with `id,frame,label` rows.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes `checkpoint.json` and `loss.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes `metrics.json` and `metrics.txt`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Recordings for the collision and off-road rates; defaults to
        /// `scenes/` next to the data file when present.
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the target vehicle's modes and plan the ego's contingency branches.
    Plan {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Ego vehicle id (same as `--set plan.ego=ID`).
        #[arg(long)]
        ego: Option<u32>,
        /// Planning frame (same as `--set plan.frame=T`).
        #[arg(long)]
        frame: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render plan, metrics or loss files as SVG.
    Plot {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration as TOML.
    Config,
}

impl Cli {
    /// Resolves the layered configuration; subcommand shortcuts count as flags.
    pub fn resolve(&self, env_seed: Option<&str>) -> Result<RunConfig, CliError> {
        let mut sets = Vec::new();
        if let Command::Plan { ego, frame, .. } = &self.command {
            if let Some(e) = ego {
                sets.push(format!("plan.ego={e}"));
            }
            if let Some(f) = frame {
                sets.push(format!("plan.frame={f}"));
            }
        }
        sets.extend(self.sets.iter().cloned());
        RunConfig::resolve(self.config.as_deref(), env_seed, self.seed, &sets)
    }
}

/// Runs one subcommand; progress and summaries go to stdout.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = cli.resolve(env_seed.as_deref())?;
    match &cli.command {
        Command::GenData { out } => {
            let s = commands::gen_data(&cfg, out)?;
            println!(
                "{} scenes, {} train / {} test samples (class counts LK/RLC/LLC {:?} / {:?})",
                s.scenes, s.train, s.test, s.train_counts, s.test_counts
            );
        }
        Command::Label { input, meta, out } => {
            let n = commands::label(&cfg, input, meta.as_deref(), out)?;
            println!("{n} lane-change episodes labelled");
        }
        Command::Train { data, out } => {
            let logs = commands::train(&cfg, data, out)?;
            if let (Some(a), Some(b)) = (logs.first(), logs.last()) {
                println!("L_total {:.4} -> {:.4} over {} epochs", a.l_total, b.l_total, logs.len());
            }
        }
        Command::Eval { checkpoint, data, scenes, out } => {
            let report = commands::eval(&cfg, checkpoint, data, scenes.as_deref(), out)?;
            print!("{}", report.table());
        }
        Command::Plan { checkpoint, tracks, meta, out, .. } => {
            let a = commands::plan(&cfg, checkpoint, tracks, meta.as_deref(), out)?;
            let u0 = a.plan.controls[0][0];
            println!(
                "ego {} vs target {}: {} branches, u0 = ({:.3}, {:.3}), KKT residual {:.2e}",
                a.ego_id,
                a.tv_id,
                a.plan.controls.len(),
                u0[0],
                u0[1],
                a.plan.kkt_residual
            );
        }
        Command::Plot { inputs, out } => {
            for p in commands::plot(&cfg, inputs, out)? {
                println!("{}", p.display());
            }
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}
