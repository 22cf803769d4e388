//! Command-line driver: configuration loading, the subcommands and figure output.

pub mod commands;
pub mod config;
pub mod figures;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use stylesmooth::stylespace::{InterpStrategy, DEFAULT_PATH_STEPS};
use stylesmooth::Result;

use crate::commands::{InterpolateArgs, Metric};
use crate::config::{apply_overrides, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "stylesmooth", version, about = "Train and evaluate smoothed style spaces")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for this invocation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// KEY=VALUE assignment on the configuration, e.g. train.smooth.lambda_sr=0.1.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the translator.
    Train {
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute metric reports for a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "ps")]
        metrics: Vec<Metric>,
    },
    /// Render the frames along one interpolation path.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Content image.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        from_domain: usize,
        #[arg(long)]
        to_domain: usize,
        /// Two reference images for the endpoints; mapper noise is used otherwise.
        #[arg(long, num_args = 2, value_names = ["START", "END"])]
        references: Option<Vec<PathBuf>>,
        #[arg(long, default_value_t = DEFAULT_PATH_STEPS)]
        steps: usize,
        #[arg(long, value_enum, default_value = "lerp")]
        strategy: StrategyArg,
        /// Output PNG, relative to the output directory unless absolute.
        #[arg(long, default_value = "figures/interpolation.png")]
        output: PathBuf,
    },
    /// Triplet gap distribution and style code plots.
    AnalyzeSpace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_triplets: Option<usize>,
    },
    /// Train the conv backbone used by lpips, fid and the linearity table.
    TrainBackbone,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum StrategyArg {
    Lerp,
    Slerp,
}

impl From<StrategyArg> for InterpStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Lerp => InterpStrategy::Lerp,
            StrategyArg::Slerp => InterpStrategy::Slerp,
        }
    }
}

/// Loads the config file (or defaults), then applies `--override`, `--out` and `--seed`.
pub fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = apply_overrides(&base, &common.overrides)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.common)?;
    let seed = cfg.train.seed;
    match cli.command {
        Command::Train { iterations, resume } => {
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            let ck = commands::cmd_train(&mut cfg, resume.as_deref(), iterations)?;
            println!("{}", ck.display());
        }
        Command::Evaluate { checkpoint, metrics } => {
            for p in commands::cmd_evaluate(&cfg, &checkpoint, &metrics, seed)? {
                println!("{}", p.display());
            }
        }
        Command::Interpolate {
            checkpoint,
            source,
            from_domain,
            to_domain,
            references,
            steps,
            strategy,
            output,
        } => {
            let references = references.map(|r| [r[0].clone(), r[1].clone()]);
            let args = InterpolateArgs {
                source,
                from_domain,
                to_domain,
                references,
                steps,
                strategy: strategy.into(),
                output,
            };
            commands::cmd_interpolate(&cfg, &checkpoint, &args, seed)?;
        }
        Command::AnalyzeSpace { checkpoint, n_triplets } => {
            let n = n_triplets.unwrap_or(cfg.analyze.n_triplets);
            let r = commands::cmd_analyze_space(&cfg, &checkpoint, n, seed)?;
            println!("{}", serde_json::to_string(&r.results)?);
        }
        Command::TrainBackbone => {
            let p = commands::cmd_train_backbone(&cfg, seed)?;
            println!("{}", p.display());
        }
    }
    Ok(())
}
