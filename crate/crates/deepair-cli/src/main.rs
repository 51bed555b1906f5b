//! `deepair`: one binary driving the whole pipeline, from synthetic data
//! through training to citywide forecasts.
//!
//! Exit codes: 0 success, 1 pipeline error (one line on stderr, qualified
//! by the failing module), 2 usage error.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// A pipeline failure attributed to the module that raised it, so the
/// one-line stderr message says where to look.
#[derive(Debug)]
pub struct CliError {
    pub module: &'static str,
    pub message: String,
}

impl From<deepair::Error> for CliError {
    fn from(e: deepair::Error) -> Self {
        use deepair::Error::*;
        let module = match &e {
            Grid(_) | Schema(_) | OutsideGrid { .. } | TooShortToSplit { .. }
            | DatasetVersion { .. } | DatasetLength { .. } | DatasetChecksum { .. } => "gridstore",
            ChannelNotInReport(_) => "interp",
            UndefinedMetric(_) | PollutantNotInTable(_) => "evaluator",
            Model(_) | UnknownModel { .. } => "model",
            Train(_) | Diverged { .. } => "trainer",
            UnstableConfig { .. } | Synth(_) => "synthcity",
            Tensor(_) => "tensorcore",
            Io(_) | Json(_) | Csv(_) => "io",
        };
        CliError {
            module,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "deepair",
    version,
    about = "Hybrid CNN-LSTM air pollution forecasting pipeline",
    after_help = "Exit codes: 0 success, 1 pipeline error, 2 usage error.\n\
                  DEEPAIR_THREADS caps the worker pool (default: all cores)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file with flat keys; defaults apply for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set lr=0.05 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Single-threaded bit-reproducible mode.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory; default creates runs/<timestamp>-seed<n>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city dataset (truth + station observations).
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Simulation seed (shorthand for --set seed=N).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Ingest a station observation CSV onto the grid.
    Ingest {
        #[command(flatten)]
        common: CommonArgs,
        /// CSV with station_id,lat,lon,timestamp,channel,value rows.
        #[arg(long)]
        observations: PathBuf,
    },
    /// Interpolate, gate, normalize, and split a dataset for training.
    Preprocess {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory from synth or ingest.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a forecasting model on prepared data.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Prepared data directory from preprocess (or a train run dir).
        #[arg(long)]
        data: PathBuf,
        /// Model kind: deepair, resnet_lstm, lstm_only, or persistence.
        #[arg(long)]
        model: Option<String>,
    },
    /// Evaluate a trained model on the held-out test segment.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint (or a run directory containing model.bin).
        #[arg(long)]
        model: PathBuf,
        /// Prepared data directory.
        #[arg(long)]
        data: PathBuf,
    },
    /// Produce a citywide forecast map for one hour.
    Forecast {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint (or a run directory containing model.bin).
        #[arg(long)]
        model: PathBuf,
        /// Prepared data directory.
        #[arg(long)]
        data: PathBuf,
        /// Hour index to forecast (shorthand for --set forecast_hour=N).
        #[arg(long)]
        hour: Option<usize>,
    },
    /// Summarize a run directory on stdout.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// Run directory to read.
        #[arg(long)]
        run: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Synth { common, .. }
            | Command::Ingest { common, .. }
            | Command::Preprocess { common, .. }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Forecast { common, .. }
            | Command::Report { common, .. } => common,
        }
    }

}

fn load_config(command: &Command) -> Result<RunConfig, CliError> {
    let common = command.common();
    let mut overrides = common.set.clone();
    match command {
        Command::Synth { seed: Some(s), .. } => overrides.push(format!("seed={s}")),
        Command::Train { model: Some(kind), .. } => overrides.push(format!("model=\"{kind}\"")),
        Command::Forecast { hour: Some(h), .. } => overrides.push(format!("forecast_hour={h}")),
        _ => {}
    }
    if common.deterministic {
        overrides.push("deterministic=true".to_string());
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

/// Sizes the global worker pool: 1 in deterministic mode, else
/// DEEPAIR_THREADS, else every core.
fn init_thread_pool(config: &RunConfig) -> Result<(), CliError> {
    let threads = if config.deterministic {
        1
    } else {
        match std::env::var("DEEPAIR_THREADS") {
            Ok(raw) => raw.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| CliError {
                module: "cli",
                message: format!("DEEPAIR_THREADS must be a positive integer, got {raw:?}"),
            })?,
            Err(_) => 0,
        }
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError {
                module: "cli",
                message: format!("cannot size worker pool: {e}"),
            })?;
    }
    Ok(())
}

/// The seed a run directory is named after: the stage's own seed.
fn run_seed(command: &Command, config: &RunConfig) -> u64 {
    match command {
        Command::Train { .. } => config.train_seed,
        _ => config.seed,
    }
}

fn run(command: Command) -> Result<(), CliError> {
    let config = load_config(&command)?;
    init_thread_pool(&config)?;

    match &command {
        Command::Report { run, .. } => {
            rundir::init_logging(None);
            return commands::cmd_report(run);
        }
        Command::Train { .. } => {
            // Refuse unknown kinds before a run directory exists.
            commands::check_model_kind(&config)?;
        }
        _ => {}
    }

    let out = rundir::resolve_out_dir(
        command.common().out.as_deref(),
        run_seed(&command, &config),
    )?;
    match &command {
        // Dataset-producing commands keep their output byte-reproducible:
        // logs go to stderr only.
        Command::Synth { .. } | Command::Ingest { .. } | Command::Preprocess { .. } => {
            rundir::init_logging(None)
        }
        _ => rundir::init_logging(Some(&out)),
    }

    match &command {
        Command::Synth { .. } => commands::cmd_synth(&config, &out),
        Command::Ingest { observations, .. } => commands::cmd_ingest(&config, observations, &out),
        Command::Preprocess { data, .. } => commands::cmd_preprocess(&config, data, &out),
        Command::Train { data, .. } => commands::cmd_train(&config, data, &out),
        Command::Evaluate { model, data, .. } => {
            commands::cmd_evaluate(&config, &commands::resolve_model_path(model), data, &out)
        }
        Command::Forecast { model, data, .. } => {
            commands::cmd_forecast(&config, &commands::resolve_model_path(model), data, &out)
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {}: {}", e.module, e.message);
        std::process::exit(1);
    }
}
