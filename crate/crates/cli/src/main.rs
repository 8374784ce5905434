use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use vgt_cli::commands::{self, RunLog};
use vgt_cli::{parse_config, RunConfig};

#[derive(Parser)]
#[command(name = "vgt", version, about = "Two-stream vision/grid transformer for document layout analysis")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus with COCO annotations.
    Synth {
        #[arg(long)]
        pages: Option<usize>,
        #[arg(long)]
        val_pages: Option<usize>,
    },
    /// Render the token-id grid of one OCR page as PNG and CSV.
    GridDump {
        #[arg(long)]
        page: PathBuf,
    },
    /// Pre-train the grid stream on a directory of OCR pages.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train the detector.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Checkpoint whose grid-stream weights initialise the model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Compute mAP@[0.50:0.95] of a checkpoint or of a COCO results file.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

fn set_path(cfg: &mut RunConfig, key: &str, p: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = p {
        cfg.apply_override(&format!("{key}={}", p.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.common.out {
        cfg.out = o.clone();
    }
    match &cli.cmd {
        Cmd::Synth { pages, val_pages } => {
            if let Some(n) = pages {
                cfg.synth_pages = *n;
            }
            if let Some(n) = val_pages {
                cfg.synth_val_pages = *n;
            }
        }
        Cmd::Pretrain { corpus } => set_path(&mut cfg, "corpus", corpus)?,
        Cmd::Train { train, val, init } => {
            set_path(&mut cfg, "train_data", train)?;
            set_path(&mut cfg, "val_data", val)?;
            set_path(&mut cfg, "init", init)?;
        }
        Cmd::Eval { data, .. } => set_path(&mut cfg, "val_data", data)?,
        Cmd::GridDump { .. } => {}
    }
    cfg.validate()?;
    let f64_mode = match std::env::var("VGT_PRECISION").as_deref() {
        Err(_) | Ok("f32") => false,
        Ok("f64") => true,
        Ok(other) => bail!("VGT_PRECISION must be f32 or f64, got `{other}`"),
    };
    let mut log = RunLog::default();
    log.note(format!("config: {cfg:?}"));
    match cli.cmd {
        Cmd::Synth { .. } => commands::synth(&cfg, &mut log)?,
        Cmd::GridDump { page } => commands::grid_dump(&cfg, &page, &mut log)?,
        Cmd::Pretrain { .. } if f64_mode => commands::pretrain::<f64>(&cfg, &mut log)?,
        Cmd::Pretrain { .. } => commands::pretrain::<f32>(&cfg, &mut log)?,
        Cmd::Train { .. } if f64_mode => commands::train::<f64>(&cfg, &mut log)?,
        Cmd::Train { .. } => commands::train::<f32>(&cfg, &mut log)?,
        Cmd::Eval { checkpoint, predictions, .. } => {
            let map = if f64_mode {
                commands::eval::<f64>(&cfg, checkpoint.as_deref(), predictions.as_deref(), &mut log)?
            } else {
                commands::eval::<f32>(&cfg, checkpoint.as_deref(), predictions.as_deref(), &mut log)?
            };
            println!("mAP {map:.4}");
        }
    }
    log.write(&cfg.out)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
