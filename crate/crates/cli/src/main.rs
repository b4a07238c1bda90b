use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;
use vioc_core::data::Partition;

mod commands;
mod config;

use config::PipelineConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// Zero-shot product attribute-value generation from images.
#[derive(Debug, Parser)]
#[command(name = "vioc", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for split sampling and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fraction of each category's aspects held out as unseen.
    #[arg(long, global = true)]
    unseen_fraction: Option<f64>,
    /// Similarity above which a prompt answer is taken as is [default: 0.95].
    #[arg(long, global = true)]
    tau_d: Option<f64>,
    /// OCR confidence a token must exceed [default: 0.5].
    #[arg(long, global = true)]
    tau_c: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = PartitionArg::Test)]
    partition: PartitionArg,
    /// Parallel images during inference (0 uses every core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Add a per-category breakdown to the report.
    #[arg(long, global = true)]
    by_category: bool,
    /// Add a per-attribute breakdown to the report.
    #[arg(long, global = true)]
    by_attribute: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PartitionArg {
    Val,
    Test,
}

impl From<PartitionArg> for Partition {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Val => Partition::Val,
            PartitionArg::Test => Partition::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Drop unusable rows, normalize and merge aspects.
    Prepare,
    /// Sample a generalized zero-shot split and validate it.
    Split,
    /// Train the projector and decoder on text only.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Predict aspects for the images of a partition.
    Infer,
    /// Score predictions against gold aspects.
    Evaluate {
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Gold corpus; defaults to the configured partition.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print the table for an existing report.json.
    Report {
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic corpus with stub images and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        products: usize,
    },
    /// Serve stub models over the adapter protocol on stdin/stdout.
    #[command(hide = true)]
    StubAdapter {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = vioc_core::models::stub::DEFAULT_DIM)]
        dim: usize,
    },
}

fn load_config(global: &Global) -> Result<Option<PipelineConfig>, CliError> {
    let Some(path) = &global.config else {
        return Ok(None);
    };
    let mut config = PipelineConfig::load(path)?;
    if let Some(seed) = global.seed {
        config.split.seed = seed;
        config.train.seed = seed;
    }
    if let Some(f) = global.unseen_fraction {
        config.split.unseen_fraction = f;
    }
    if let Some(t) = global.tau_d {
        config.inference.tau_d = t;
    }
    if let Some(t) = global.tau_c {
        config.inference.tau_c = t;
    }
    if let Some(w) = global.workers {
        config.inference.workers = w;
    }
    config.validate()?;
    Ok(Some(config))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli.global)?;
    let required = || {
        config
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs --config".into()))
    };
    let partition = Partition::from(cli.global.partition);
    match cli.command {
        Command::Prepare => commands::prepare(required()?),
        Command::Split => commands::split(required()?),
        Command::Train { resume } => commands::train(required()?, resume),
        Command::Infer => commands::infer(required()?, partition),
        Command::Evaluate {
            predictions,
            gold,
            output_dir,
        } => commands::evaluate_cmd(
            config.as_ref(),
            &commands::EvaluateArgs {
                predictions,
                gold,
                output_dir,
                partition,
                by_category: cli.global.by_category,
                by_attribute: cli.global.by_attribute,
            },
        ),
        Command::Report { report } => {
            let path = match (report, &config) {
                (Some(p), _) => p,
                (None, Some(c)) => c.output_dir.join("report.json"),
                (None, None) => return Err(CliError::Config("report needs --report or --config".into())),
            };
            commands::report_cmd(&path)
        }
        Command::Synth { out, products } => commands::synth(&out, products, cli.global.seed.unwrap_or(0)),
        Command::StubAdapter { images, noise, dim } => commands::stub_adapter(&images, noise, dim),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
