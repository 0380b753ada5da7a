//! `boxreg`: train, refine, propose, evaluate and report.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] boxreg::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use boxreg::Error as E;
        match self {
            CliError::Usage(_) | CliError::Lib(E::InvalidConfig(_)) => 1,
            CliError::Lib(E::NumericRange(_) | E::Diverged { .. }) => 3,
            CliError::Lib(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "boxreg", version, about = "Class-agnostic bounding-box regression")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Where scenes come from, plus flags every command shares.
#[derive(Debug, Args)]
struct Common {
    /// COCO-style annotation file.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Scene cache written by `boxreg synth`.
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Generate synthetic scenes.
    #[arg(long)]
    synth: bool,
    /// Number of synthetic scenes.
    #[arg(long)]
    synth_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Threads for per-scene work.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a regressor and write `model.ubbr` and `train_log.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        /// `iou` or `smooth_l1`.
        #[arg(long)]
        loss: Option<boxreg::LossKind>,
        /// Sampler IoU rejection threshold.
        #[arg(long)]
        iou_threshold: Option<f64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Hidden layer widths, comma-separated.
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Refine boxes iteratively, one output file per iteration.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Box file (`image_id,xmin,ymin,xmax,ymax`).
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long, default_value_t = 1)]
        iters: usize,
    },
    /// Generate ranked proposals from the seed grid.
    Propose {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "raw_seeds")]
        model: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        /// Proposals kept per image.
        #[arg(long)]
        keep: Option<usize>,
        /// Rank the unrefined seed grid instead (baseline).
        #[arg(long)]
        raw_seeds: bool,
    },
    /// Recall curves and CorLoc for one or more proposal files.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Proposal file, optionally labelled as `label=path`. Repeatable.
        #[arg(long, required = true)]
        proposals: Vec<String>,
        /// IoU thresholds, comma-separated.
        #[arg(long, value_delimiter = ',')]
        iou: Option<Vec<f64>>,
        /// Proposal budgets, comma-separated.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Perturb ground truths with the sampler into a box file.
    Perturb {
        #[command(flatten)]
        common: Common,
    },
    /// Write synthetic scenes to a scene cache.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Collect tables from earlier runs into `report.md`.
    Report {
        #[arg(long)]
        train_dir: Option<PathBuf>,
        #[arg(long)]
        refine_dir: Option<PathBuf>,
        #[arg(long)]
        eval_dir: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn apply_common(cfg: &mut RunConfig, c: &Common) {
    if let Some(p) = &c.annotations {
        cfg.data.annotations = Some(p.clone());
    }
    if let Some(p) = &c.scenes {
        cfg.data.scenes = Some(p.clone());
    }
    cfg.data.synth |= c.synth;
    if let Some(n) = c.synth_count {
        cfg.data.synth_count = n;
    }
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Train {
            common,
            loss,
            iou_threshold,
            max_epochs,
            hidden,
            lr,
        } => {
            apply_common(&mut cfg, &common);
            if let Some(l) = loss {
                cfg.train.loss = l;
            }
            if let Some(t) = iou_threshold {
                cfg.sampler.t = t;
            }
            if let Some(n) = max_epochs {
                cfg.train.max_epochs = n;
            }
            if let Some(h) = hidden {
                cfg.train.hidden = h;
            }
            if let Some(lr) = lr {
                cfg.train.initial_lr = lr;
            }
            commands::train(&cfg.resolve()?, &common.out_dir)
        }
        Command::Refine {
            common,
            model,
            boxes,
            iters,
        } => {
            apply_common(&mut cfg, &common);
            commands::refine(&cfg.resolve()?, &model, &boxes, iters, &common.out_dir)
        }
        Command::Propose {
            common,
            model,
            iters,
            keep,
            raw_seeds,
        } => {
            apply_common(&mut cfg, &common);
            if let Some(i) = iters {
                cfg.proposals.iterations = i;
            }
            if let Some(k) = keep {
                cfg.max_proposals = k;
            }
            commands::propose(&cfg.resolve()?, model.as_deref(), raw_seeds, &common.out_dir)
        }
        Command::Eval {
            common,
            proposals,
            iou,
            k,
        } => {
            apply_common(&mut cfg, &common);
            if let Some(t) = iou {
                cfg.eval.iou_thresholds = t;
            }
            if let Some(k) = k {
                cfg.eval.k = k;
            }
            commands::eval(&cfg.resolve()?, &proposals, &common.out_dir)
        }
        Command::Perturb { common } => {
            apply_common(&mut cfg, &common);
            commands::perturb(&cfg.resolve()?, &common.out_dir)
        }
        Command::Synth { common } => {
            apply_common(&mut cfg, &common);
            cfg.data.synth = true;
            commands::synth(&cfg.resolve()?, &common.out_dir)
        }
        Command::Report {
            train_dir,
            refine_dir,
            eval_dir,
            out_dir,
        } => commands::report(train_dir.as_deref(), refine_dir.as_deref(), eval_dir.as_deref(), &out_dir),
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
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
