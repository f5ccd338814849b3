use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transducer::Error as CoreError;

mod config;
mod decode;
mod gen_data;
mod selfcheck;
mod sweep;
mod train;

/// Bad arguments or configuration; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// At least one self-check failed; exits with status 3.
#[derive(Debug)]
pub struct SelfcheckFailed(pub usize);

impl fmt::Display for SelfcheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} self-check(s) failed", self.0)
    }
}

impl std::error::Error for SelfcheckFailed {}

#[derive(Debug, Parser)]
#[command(
    name = "transduce",
    version,
    about = "Transducer training, decoding and evaluation"
)]
struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic train/dev/eval splits.
    GenData(gen_data::GenDataArgs),
    /// Train a model with the NLL or MWER criterion.
    Train(train::TrainArgs),
    /// Decode a dataset and score it.
    Decode(decode::DecodeArgs),
    /// Decode over a grid of settings and plot WER against beam size.
    Sweep(sweep::SweepArgs),
    /// Run the oracle self-checks.
    Selfcheck(selfcheck::SelfcheckArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(UsageError("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()?;
    }
    match cli.command {
        Command::GenData(a) => gen_data::run(a),
        Command::Train(a) => train::run(a),
        Command::Decode(a) => decode::run(a),
        Command::Sweep(a) => sweep::run(a),
        Command::Selfcheck(a) => selfcheck::run(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<SelfcheckFailed>() {
        return 3;
    }
    if err.is::<UsageError>() {
        return 1;
    }
    match err.downcast_ref::<CoreError>() {
        Some(
            CoreError::Config(_)
            | CoreError::InvalidRange(_)
            | CoreError::InvalidTemperature(_)
            | CoreError::MissingSeedModel,
        ) => 1,
        _ => 2,
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
