//! `blp`: synthetic data, preprocessing, training and evaluation from one config file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use blp_core::{Error, ErrorKind};
use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig, SEED_ENV};

#[derive(Parser)]
#[command(name = "blp", version, about = "Battery life prediction pipeline")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fleet with ground-truth labels.
    Synth(Overrides),
    /// Clean, label and resample a manifest into a sample cache.
    Preprocess(Overrides),
    /// Train the configured model over the replicate seeds.
    Train(Overrides),
    /// Evaluate a checkpoint on the test split of its replicate.
    Eval {
        #[command(flatten)]
        flags: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train on several usable-cycle counts and report the error per count.
    Sweep(Overrides),
    /// Pretrain on a source domain and transfer to the target domain.
    Transfer(Overrides),
    /// Check the configured model's gradients by central differences.
    Gradcheck {
        #[command(flatten)]
        flags: Overrides,
        /// Entries probed per parameter tensor (all when omitted).
        #[arg(long)]
        entries: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn setup(flags: &Overrides) -> Result<RunConfig, Error> {
    let cfg = config::resolve(flags, std::env::var(SEED_ENV).ok())?;
    if let Some(jobs) = flags.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(f) => {
            let cfg = setup(&f)?;
            let out = commands::prepare_out(f.out.as_deref(), f.force)?;
            commands::synth(&cfg, &out).map(drop)
        }
        Command::Preprocess(f) => {
            let cfg = setup(&f)?;
            let out = commands::prepare_out(f.out.as_deref(), f.force)?;
            commands::preprocess(&cfg, &out).map(drop)
        }
        Command::Train(f) => {
            let cfg = setup(&f)?;
            let out = commands::prepare_out(f.out.as_deref(), f.force)?;
            commands::train(&cfg, &out).map(drop)
        }
        Command::Eval { flags, checkpoint } => {
            let cfg = setup(&flags)?;
            let out = commands::prepare_out(flags.out.as_deref(), flags.force)?;
            commands::eval(&cfg, &out, &checkpoint).map(drop)
        }
        Command::Sweep(f) => {
            let cfg = setup(&f)?;
            let out = commands::prepare_out(f.out.as_deref(), f.force)?;
            commands::sweep(&cfg, &out).map(drop)
        }
        Command::Transfer(f) => {
            let cfg = setup(&f)?;
            let out = commands::prepare_out(f.out.as_deref(), f.force)?;
            commands::transfer(&cfg, &out).map(drop)
        }
        Command::Gradcheck { flags, entries } => {
            let cfg = setup(&flags)?;
            let out = match &flags.out {
                Some(_) => Some(commands::prepare_out(flags.out.as_deref(), flags.force)?),
                None => None,
            };
            commands::gradcheck(&cfg, out.as_deref(), entries).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
