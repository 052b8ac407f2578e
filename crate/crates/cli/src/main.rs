use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use compositenet::commands;
use compositenet::config::{describe, KeySpec, RunConfig};
use compositenet::CliError;

#[derive(Parser)]
#[command(name = "compositenet", version, about = "CompositeNet point-cloud classification and anomaly detection")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and report test accuracy.
    Train(RunArgs),
    /// Train an anomaly detector on one normal class and score a test set.
    Detect(RunArgs),
    /// Trainable parameter counts over an M sweep.
    Paramcount(RunArgs),
    /// Accuracy, AUC or method comparison from written results.
    Eval(RunArgs),
    /// Forward and training-step timings.
    Bench(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the effective configuration here and exit.
    #[arg(long)]
    dump_config: Option<PathBuf>,
    /// List the accepted keys and exit.
    #[arg(long)]
    list_keys: bool,
    /// Key overrides: `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

type Handler = fn(&RunConfig, &mut dyn Write) -> Result<(), CliError>;

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let (args, schema, handler): (RunArgs, &'static [KeySpec], Handler) = match cli.command {
        Command::Train(a) => (a, commands::TRAIN_KEYS, commands::train),
        Command::Detect(a) => (a, commands::DETECT_KEYS, commands::detect),
        Command::Paramcount(a) => (a, commands::PARAMCOUNT_KEYS, commands::paramcount),
        Command::Eval(a) => (a, commands::EVAL_KEYS, commands::evaluate),
        Command::Bench(a) => (a, commands::BENCH_KEYS, commands::bench),
    };
    let mut stdout = std::io::stdout().lock();
    if args.list_keys {
        return stdout
            .write_all(describe(schema).as_bytes())
            .map_err(|e| CliError::Io(e.to_string()));
    }
    let cfg = RunConfig::load(schema, args.config.as_deref(), &args.overrides)?;
    if let Some(path) = args.dump_config {
        return std::fs::write(&path, cfg.dump()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())));
    }
    handler(&cfg, &mut stdout)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
