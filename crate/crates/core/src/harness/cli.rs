//! Command-line interface: `gen-data`, `split`, `pretrain`,
//! `target-pretrain`, `finetune`, `eval`, `transfer`, `sweep`, `plot`.

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Overrides};
use crate::harness::pipeline;
use crate::harness::plot::{cmd_plot, PlotKind};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "targetpre",
    version,
    about = "Contrastive target pretraining and semi-supervised finetuning at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration file (INI-style key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override run.out (output directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweep/transfer jobs; 1 guarantees determinism.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset under <out>/dataset.
    GenData,
    /// Write the labeled/unlabeled split file.
    Split {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override split.n_labeled.
        #[arg(long)]
        labeled: Option<usize>,
    },
    /// Contrastive pretraining from random weights (generic checkpoint).
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Anchored contrastive target pretraining from a parent checkpoint.
    TargetPretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Parent checkpoint directory.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Comma-separated epochs at which to snapshot the weights.
        #[arg(long)]
        snapshots: Option<String>,
    },
    /// Semi-supervised finetuning (FixMatch / Mean Teacher / CutMix).
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Initial weights: "random" or a checkpoint directory.
        #[arg(long)]
        init: Option<String>,
    },
    /// Evaluate a checkpoint (metrics from eval.metrics or --metrics).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated: accuracy, miou, cluster.
        #[arg(long)]
        metrics: Option<String>,
    },
    /// Cross-dataset transfer matrix over the given dataset configs.
    Transfer {
        /// One config file per dataset.
        configs: Vec<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Accuracy versus target-pretraining epochs (sweep.snapshots x
    /// sweep.labels).
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Merge metric files into curve data and render a chart.
    Plot {
        #[arg(long)]
        kind: String,
        /// Output prefix for <prefix>.csv and <prefix>.png.
        #[arg(long, default_value = "plot")]
        prefix: PathBuf,
        files: Vec<PathBuf>,
    },
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        threads: cli.threads,
        ..Default::default()
    };
    match cli.command {
        Command::GenData => {
            let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
            let dir = pipeline::cmd_gen_data(&cfg)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Split { data, labeled } => {
            overrides.data = data;
            let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
            if let Some(n) = labeled {
                cfg.split_n_labeled = n;
            }
            let path = pipeline::cmd_split(&cfg)?;
            println!("split written to {}", path.display());
        }
        Command::Pretrain { data } => {
            overrides.data = data;
            let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
            let out = pipeline::cmd_pretrain(&cfg)?;
            println!("checkpoint {} at {}", out.run_id, out.ckpt_dir.display());
        }
        Command::TargetPretrain { data, init, snapshots } => {
            overrides.data = data;
            overrides.init = init.map(|p| p.display().to_string());
            let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
            let snaps = match snapshots {
                None => Vec::new(),
                Some(s) => parse_usize_list(&s)?,
            };
            let out = pipeline::cmd_target_pretrain(&cfg, &snaps)?;
            println!("checkpoint {} at {}", out.run_id, out.ckpt_dir.display());
        }
        Command::Finetune { data, split, init } => {
            overrides.data = data;
            overrides.split = split;
            overrides.init = init;
            let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
            let out = pipeline::cmd_finetune(&cfg)?;
            println!("checkpoint {} at {}", out.run_id, out.ckpt_dir.display());
        }
        Command::Eval { ckpt, data, metrics } => {
            overrides.data = data;
            let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
            if let Some(m) = metrics {
                cfg.eval_metrics = m
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
            }
            let (path, report) = pipeline::cmd_eval(&cfg, &ckpt)?;
            for (k, v) in &report.metrics {
                println!("{k} = {v:.6}");
            }
            println!("report written to {}", path.display());
        }
        Command::Transfer { configs, init } => {
            if configs.is_empty() {
                return Err(Error::Config("transfer needs at least one config file".into()));
            }
            overrides.init = init.map(|p| p.display().to_string());
            let cfgs: Result<Vec<ExperimentConfig>> = configs
                .iter()
                .map(|p| ExperimentConfig::load(Some(p), &overrides))
                .collect();
            let path = pipeline::cmd_transfer(&cfgs?)?;
            println!("transfer matrix written to {}", path.display());
            print!("{}", std::fs::read_to_string(&path).unwrap_or_default());
        }
        Command::Sweep { data, init } => {
            overrides.data = data;
            overrides.init = init.map(|p| p.display().to_string());
            let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
            let path = pipeline::cmd_sweep(&cfg)?;
            println!("sweep table written to {}", path.display());
            print!("{}", std::fs::read_to_string(&path).unwrap_or_default());
        }
        Command::Plot { kind, prefix, files } => {
            let kind = PlotKind::parse(&kind)?;
            let (csv, png) = cmd_plot(kind, &files, &prefix)?;
            println!("curve data {} and chart {}", csv.display(), png.display());
        }
    }
    Ok(())
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad integer '{p}' in list")))
        })
        .collect()
}
