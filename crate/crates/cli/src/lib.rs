//! The `bsfa` command line: synthetic data, preparation, training, fusion,
//! evaluation and box-plot reports.
//!
//! Every command reads the same TOML run configuration (optional, with
//! `--set key=value` overrides) and stamps the hash of the resolved
//! configuration into what it writes.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::PathBuf;

use bsfa_core::data::Modality;
use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "bsfa", version, about = "Joint registration and fusion of unaligned MRI/CT/PET/SPECT pairs")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Output directory (overrides `run.out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic-shapes dataset in the ingest layout.
    Synth {
        /// Dataset root to create.
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 24)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Modality directory; repeat for several. Defaults to CT-MRI.
        #[arg(long)]
        modality: Vec<String>,
    },
    /// Ingest a dataset, split it and cache the test deformations.
    Prepare {
        #[arg(long)]
        root: Option<PathBuf>,
        /// Restrict to one modality directory.
        #[arg(long)]
        modality: Option<String>,
        /// Split seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train, or resume training from a checkpoint.
    Train {
        /// Split manifest; without one every ingested pair is used for training.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs of this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Register and fuse one pair with a trained checkpoint.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        /// The non-MRI image to be registered.
        #[arg(long)]
        moving: PathBuf,
        /// The MRI reference.
        #[arg(long)]
        reference: PathBuf,
    },
    /// Score a checkpoint on the manifest's test pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        /// CSV path; defaults to `<out>/metrics.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Box plots and a summary table from one or more metric CSVs.
    Report {
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
    },
}

fn path_override(key: &str, p: &std::path::Path) -> String {
    format!("{key}={}", toml::Value::String(p.display().to_string()))
}

/// Resolves the configuration for `cli` and runs its command, returning a
/// one-line summary.
pub fn run(cli: Cli) -> Result<String> {
    let mut overrides = cli.overrides.clone();
    if let Some(out) = &cli.out {
        overrides.push(path_override("run.out_dir", out));
    }
    match &cli.command {
        Command::Prepare { root, modality, seed } => {
            if let Some(r) = root {
                overrides.push(path_override("data.root", r));
            }
            if let Some(m) = modality {
                overrides.push(format!("data.modalities=[{}]", toml::Value::String(m.clone())));
            }
            if let Some(s) = seed {
                overrides.push(format!("data.split_seed={s}"));
            }
        }
        Command::Train { root: Some(r), .. } | Command::Eval { root: Some(r), .. } => {
            overrides.push(path_override("data.root", r));
        }
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth {
            root,
            count,
            size,
            seed,
            modality,
        } => {
            let modalities = if modality.is_empty() {
                vec![Modality::Ct]
            } else {
                modality
                    .iter()
                    .map(|m| Modality::from_dir_name(m).ok_or_else(|| CliError::Usage(format!("unknown modality {m}"))))
                    .collect::<Result<Vec<_>>>()?
            };
            let n = commands::cmd_synth(&root, &modalities, count, size, seed)?;
            Ok(format!("wrote {n} synthetic pairs to {}", root.display()))
        }
        Command::Prepare { .. } => {
            let s = commands::cmd_prepare(&cfg)?;
            Ok(format!(
                "{} train / {} test pairs ({} failures); manifest {}",
                s.train,
                s.test,
                s.failures,
                s.manifest.display()
            ))
        }
        Command::Train {
            manifest,
            resume,
            stop_after,
            ..
        } => {
            let s = commands::cmd_train(&cfg, manifest.as_deref(), resume.as_deref(), stop_after)?;
            Ok(format!(
                "trained {} epochs (now at epoch {}); last total loss {}",
                s.epochs_run,
                s.epoch,
                s.last_total.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into())
            ))
        }
        Command::Fuse {
            checkpoint,
            moving,
            reference,
        } => {
            let s = commands::cmd_fuse(&cfg, &checkpoint, &moving, &reference)?;
            Ok(format!("fused {}x{} -> {}", s.dims.0, s.dims.1, s.fused.display()))
        }
        Command::Eval {
            checkpoint,
            manifest,
            csv,
            ..
        } => {
            let csv = csv.unwrap_or_else(|| cfg.run.out_dir.join("metrics.csv"));
            let r = commands::cmd_eval(&cfg, &checkpoint, &manifest, &csv)?;
            Ok(format!("scored {} pairs -> {}", r.rows.len(), csv.display()))
        }
        Command::Report { csvs } => {
            let s = report::cmd_report(&cfg, &csvs)?;
            Ok(format!("{} plots and {}", s.plots.len(), s.table.display()))
        }
    }
}
