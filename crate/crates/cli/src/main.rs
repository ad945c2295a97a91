mod commands;
mod config;
mod failure;

use clap::{Args, Parser, Subcommand, ValueEnum};
use commands::{EvaluateArgs, Oracle};
use config::RunConfig;
use derc::corpus::{Split, DEFAULT_SEED};
use derc::gradcheck::format_table;
use failure::{Failure, EXIT_CHECK_FAILED};
use std::path::PathBuf;
use std::process::ExitCode;

/// Emotion-distribution estimation in conversation: synthetic corpora,
/// training, evaluation and gradient checks.
#[derive(Parser)]
#[command(name = "derc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. --set optim.epochs=4.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Start from the full-size architecture instead of the desk-scale one.
    #[arg(long)]
    paper_config: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory that receives the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        RunConfig::resolve(self.config.as_deref(), self.paper_config, &self.overrides, self.seed)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Compress the corpus with gzip.
        #[arg(long)]
        gzip: bool,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train a model on the train split of a corpus.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Score a checkpoint on one split of a corpus.
    Evaluate {
        #[arg(long, required_unless_present = "debug_oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Replace model output with reference distributions.
        #[arg(long, value_enum)]
        debug_oracle: Option<Oracle>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Corrupt one op's derivative, e.g. tanh.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
        /// Also write the table under a run directory here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { config, gzip, workers } => {
            let dir = commands::generate(&config.resolve()?, &config.out, gzip, workers)?;
            println!("{}", dir.display());
        }
        Command::Train { config, corpus } => {
            let (dir, outcome) = commands::train(&config.resolve()?, &corpus, &config.out)?;
            if let Some(last) = outcome.log.last() {
                eprintln!("epoch {} updates {} loss {:.6}", last.epoch, last.updates, last.loss);
            }
            println!("{}", dir.display());
        }
        Command::Evaluate { checkpoint, corpus, split, out, workers, debug_oracle } => {
            let args = EvaluateArgs {
                checkpoint: checkpoint.as_deref(),
                corpus: &corpus,
                split: split.into(),
                out: &out,
                workers,
                oracle: debug_oracle,
            };
            let (dir, report) = commands::evaluate(&args)?;
            eprint!("{}", derc::eval::report_text(&report));
            println!("{}", dir.display());
        }
        Command::Gradcheck { seed, inject_fault, out } => {
            let reports = commands::gradcheck(seed, inject_fault.as_deref(), out.as_deref())?;
            print!("{}", format_table(&reports));
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure {
                    code: EXIT_CHECK_FAILED,
                    message: format!("gradient check failed: {}", failed.join(", ")),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("derc: {f}");
            ExitCode::from(f.code)
        }
    }
}
