//! `seqid`: run identification experiments, validate datasets, summarize chains.
//!
//! Exit codes: 0 success; 1 configuration, input or I/O error; 2 model and
//! algorithm incompatible; 3 particle weights degenerated.

mod config;
mod run;
mod summarize;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Error carried to the process exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const CONFIG: u8 = 1;
    pub const INCOMPATIBLE: u8 = 2;
    pub const DEGENERATE: u8 = 3;

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: Self::CONFIG, message: message.into() }
    }

    pub fn incompatible(message: impl Into<String>) -> Self {
        Self { code: Self::INCOMPATIBLE, message: message.into() }
    }
}

impl From<seqid::Error> for Failure {
    fn from(e: seqid::Error) -> Self {
        let code = match e {
            seqid::Error::Capability(_) => Self::INCOMPATIBLE,
            seqid::Error::Degeneracy { .. } => Self::DEGENERATE,
            _ => Self::CONFIG,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::config(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::config(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "seqid", version, about = "Sequential Monte Carlo system identification experiments")]
struct Cli {
    /// Increase log verbosity (repeatable); RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set algorithm.n_particles=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; beats the config's `output` and the output root.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Root for outputs named after the experiment.
        #[arg(long, env = "SEQID_OUTPUT_ROOT")]
        output_root: Option<PathBuf>,
        /// Replace files in a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Independent chains on worker threads (MCMC algorithms only).
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        chains: u32,
    },
    /// Check a dataset file against a model's expected format and report its contents.
    Validate {
        #[arg(long)]
        model: String,
        path: PathBuf,
    },
    /// Recompute posterior summaries and IACT from chain JSONL traces.
    Summarize {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Samples discarded from the start of each chain; defaults to a tenth.
        #[arg(long)]
        burn_in: Option<usize>,
        /// Emit JSON instead of CSV.
        #[arg(long)]
        json: bool,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, set, seed, output, output_root, force, chains } => {
            let mut overrides = set;
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            let cfg = config::load_path(&config, &overrides)?;
            let opts = run::RunOptions {
                force,
                chains: chains as usize,
                output,
                output_root,
            };
            let dir = run::run(&cfg, &opts)?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Validate { model, path } => {
            let report = validate::validate(&model, &path)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Summarize { traces, burn_in, json } => summarize::summarize(&traces, burn_in, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Failure::CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
