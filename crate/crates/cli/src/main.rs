//! `cfx`: train target models and counterfactual agents, explain instances,
//! evaluate and sweep.
//!
//! Exit codes: 0 success (an invalid explanation is still a success), 2 bad
//! configuration or input, 3 predictor transport failure, 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use cfx_core::predictor::Endpoint;
use clap::{Args, Parser, Subcommand};

use commands::{Selection, SplitArg};
use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "cfx",
    version,
    about = "Counterfactual explanations for black-box tabular predictors"
)]
struct Cli {
    /// Only log warnings and errors (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config field, e.g. --set env.lambda=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; falls back to the config, then $CFX_OUTPUT_DIR.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &self.overrides, self.output_dir.as_deref())
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the in-process MLP target and print its test score.
    TrainModel(RunArgs),
    /// Train a global agent; writes a snapshot, a checkpoint and the training log.
    TrainAgent {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation, leaving a checkpoint.
        #[arg(long, value_name = "EPOCHS")]
        stop_after: Option<usize>,
    },
    /// Generate counterfactuals for selected instances.
    Explain {
        #[command(flatten)]
        run: RunArgs,
        /// Snapshot to use; defaults to agent.snap in the output directory.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Row indices into the chosen split.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// One instance in raw units, comma separated.
        #[arg(long, conflicts_with = "rows")]
        instance: Option<String>,
        /// Fine-tune a dedicated agent on each instance before the rollout.
        #[arg(long)]
        local: bool,
    },
    /// Repeated train-and-explain runs aggregated into CSV/JSON reports.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Evaluate a fixed snapshot once instead of training per repetition.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Evaluate every value of the [sweep] grid and write a summary table.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Rebuild the summary from existing per-point reports.
        #[arg(long)]
        summarize_only: bool,
    },
    /// Handshake with a predictor and print its metadata.
    ServeCheck {
        /// Take the predictor and schema from a run configuration.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, conflicts_with = "command")]
        tcp: Option<String>,
        /// Schema to check the handshake against.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Program and arguments speaking the protocol on stdin/stdout.
        #[arg(last = true)]
        command: Vec<String>,
    },
    /// Serve a saved MLP over the line protocol.
    Serve {
        #[arg(long)]
        model: PathBuf,
        /// Serve one session on stdin/stdout.
        #[arg(long, conflicts_with = "tcp", required_unless_present = "tcp")]
        stdio: bool,
        /// Listen on ADDR (e.g. 127.0.0.1:0) and print the bound address.
        #[arg(long, value_name = "ADDR")]
        tcp: Option<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainModel(run) => commands::train_model(run.load()?),
        Command::TrainAgent {
            run,
            resume,
            stop_after,
        } => commands::train_agent(run.load()?, resume, stop_after),
        Command::Explain {
            run,
            snapshot,
            rows,
            split,
            instance,
            local,
        } => commands::explain(
            run.load()?,
            snapshot,
            Selection {
                rows,
                split,
                instance,
            },
            local,
        ),
        Command::Evaluate { run, snapshot } => commands::evaluate_cmd(run.load()?, snapshot),
        Command::Sweep {
            run,
            summarize_only,
        } => commands::sweep(run.load()?, summarize_only),
        Command::ServeCheck {
            config,
            overrides,
            tcp,
            schema,
            command,
        } => {
            let cfg = config
                .map(|c| RunConfig::load(&c, &overrides, None))
                .transpose()?;
            let endpoint = match (tcp, command.is_empty()) {
                (Some(addr), _) => Some(Endpoint::Tcp(addr)),
                (None, false) => Some(Endpoint::Command(command)),
                (None, true) => None,
            };
            commands::serve_check(endpoint, cfg, schema)
        }
        Command::Serve { model, tcp, .. } => commands::serve(&model, tcp.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<cfx_core::Error>() {
            use cfx_core::Error as E;
            return match e {
                e if e.is_transport() => 3,
                e if e.is_numeric() => 4,
                E::Config(_)
                | E::Schema(_)
                | E::InvalidGoal(_)
                | E::MissingColumn(_)
                | E::Parse { .. }
                | E::EmptyDataset
                | E::Format(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // Output piped into a reader that stopped early.
        Err(e)
            if e.chain().any(|c| {
                c.downcast_ref::<std::io::Error>()
                    .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            }) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
