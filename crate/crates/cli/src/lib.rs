//! Command-line front-end for DGNO experiments.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use commands::AblationAxis;
use config::{parse_config, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] dgno::Error),
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(dgno::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// 2 for configuration problems, 3 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dgno", version, about = "Spatially varying defocus deblurring experiments")]
pub struct Cli {
    /// Experiment config file (INI); omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `[outputs] dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed applied to dataset, model and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_defaults: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training and test datasets.
    Gen {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the configured model; writes a log and a checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test set.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long, value_enum)]
        axis: AblationAxis,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare the global baseline with the face and cell variants.
    Compare {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Effective rank of a checkpoint's latent fields per operator step.
    Rank {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of the full model's gradients.
    Gradcheck,
}

/// Config file, then command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.outputs.dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
        cfg.model.seed = seed;
        cfg.training.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the parsed command line and returns what to print on success.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let cfg = resolve_config(&cli)?;
    if cli.print_defaults {
        return Ok(cfg.to_ini());
    }
    let out = cfg.outputs.dir.clone();
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| out.join("data"));
    let ckpt = |c: &Option<PathBuf>| c.clone().unwrap_or_else(|| out.join("train").join("model.ckpt"));
    let Some(command) = &cli.command else {
        return Err(CliError::Config("no subcommand given (see --help)".to_string()));
    };
    match command {
        Command::Gen { data } => commands::gen(&cfg, &data_dir(data)),
        Command::Train { data } => commands::train_cmd(&cfg, &data_dir(data), &out),
        Command::Eval { data, checkpoint } => commands::eval_cmd(&cfg, &data_dir(data), &out, &ckpt(checkpoint)),
        Command::Ablate { axis, data } => commands::ablate(&cfg, &data_dir(data), &out, *axis),
        Command::Compare { data } => commands::compare(&cfg, &data_dir(data), &out),
        Command::Rank { data, checkpoint } => commands::rank_cmd(&cfg, &data_dir(data), &out, &ckpt(checkpoint)),
        Command::Gradcheck => {
            let (summary, passed) = commands::gradcheck_cmd(&cfg, &out)?;
            if passed {
                Ok(summary)
            } else {
                Err(CliError::Runtime(dgno::Error::Contract(summary)))
            }
        }
    }
}
