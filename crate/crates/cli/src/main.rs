//! `awae`: prepare data, train aWAE and its baselines, evaluate, compare and
//! sweep.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

/// Errors surfaced to the user, grouped by exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values (exit 1).
    Usage(String),
    /// A named input path does not exist (exit 2).
    Missing(String),
    Io(PathBuf, std::io::Error),
    Lib(awae::Error),
}

impl From<awae::Error> for CliError {
    fn from(e: awae::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) if !e.is_data_error() => 1,
            _ => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Missing(m) => f.write_str(m),
            CliError::Io(path, e) => write!(f, "{}: {e}", path.display()),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "awae", version, about = "Adapted Wasserstein autoencoder for implicit-feedback recommendation")]
struct Cli {
    /// Root under which named run directories are created.
    #[arg(long, env = "AWAE_RUN_ROOT", default_value = "runs", global = true)]
    run_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest interactions (or generate synthetic ones) and write a train/val/test split.
    Prepare(PrepareArgs),
    /// Write a synthetic clustered dataset as a user,item,value CSV.
    Synthesize(SynthesizeArgs),
    /// Train a model on a prepared split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out users.
    Evaluate(EvalArgs),
    /// Evaluate several checkpoints into one table.
    Compare(CompareArgs),
    /// Train and evaluate once per value of one config key.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["input", "synthetic"])))]
pub struct PrepareArgs {
    /// user,item[,value] CSV or TSV with a header line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Generate the dataset from the synthetic_* keys instead.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    /// Shorthand for --set model=...
    #[arg(long)]
    pub model: Option<String>,
    /// Explicit run directory; overrides --name.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Run directory name under the run root (default: <model>-seed<seed>).
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum SplitName {
    Val,
    Test,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory, or a run directory (its `best` checkpoint is used).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Cutoffs R.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,50,100")]
    pub r: Vec<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Checkpoint or run directories.
    #[arg(required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,50,100")]
    pub r: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Configuration key to vary.
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,50,100")]
    pub r: Vec<usize>,
    /// Parallel training runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Keep per-value run directories under <run root>/<name>.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Synthesize(a) => commands::synthesize_cmd(a),
        Command::Train(a) => commands::train_cmd(a, &cli.run_root),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Compare(a) => commands::compare_cmd(a),
        Command::Sweep(a) => commands::sweep_cmd(a, &cli.run_root),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let help = config::keys_help();
    let matches = Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|sc| sc.after_help(help.clone()))
        .try_get_matches();
    let cli = match matches.and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
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
