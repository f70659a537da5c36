//! `actionformer` command-line tool.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Axis;
use config::RunConfig;
use error::{CliError, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "actionformer", version, about = "Temporal action localization with local-attention transformers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON config: a synthetic spec for `synth`, a run config elsewhere.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker cap for data loading and per-video inference.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train a model; writes a checkpoint, a JSON-lines log and the resolved config.
    Train,
    /// Detect actions in every feature file of a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature directory; defaults to the dataset's.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Use the raw weights instead of the averaged ones.
        #[arg(long)]
        raw_weights: bool,
    },
    /// Score predictions against ground truth.
    Eval {
        #[command(flatten)]
        inputs: EvalInputs,
        /// Comma-separated tIoU thresholds.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        /// Named threshold set: thumos, activitynet or epic.
        #[arg(long)]
        preset: Option<String>,
        /// Also write precision/recall points as CSV.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Break down false negatives and false positives.
    Profile {
        #[command(flatten)]
        inputs: EvalInputs,
    },
    /// Check analytic gradients of every op against finite differences.
    Gradcheck,
    /// Train and evaluate once per value of one setting.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

#[derive(Debug, Args)]
struct EvalInputs {
    #[arg(long)]
    predictions: PathBuf,
    /// Ground-truth JSON (`database` layout).
    #[arg(long)]
    gt: PathBuf,
    /// Only evaluate videos of this subset.
    #[arg(long)]
    subset: Option<String>,
}

fn run_config(global: &Global) -> Result<RunConfig, CliError> {
    let path = global
        .config
        .as_deref()
        .ok_or_else(|| CliError::new(ErrorKind::Usage, "this command needs --config"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = global.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let out = |default: &str| commands::out_or(g.out.clone(), default);
    match cli.command {
        Command::Synth => {
            let out = g
                .out
                .as_deref()
                .ok_or_else(|| CliError::new(ErrorKind::Usage, "synth needs --out"))?;
            commands::synth(g.config.as_deref(), g.seed, out)
        }
        Command::Train => commands::train_cmd(&run_config(g)?, &out("run")),
        Command::Predict {
            checkpoint,
            features,
            raw_weights,
        } => commands::predict(
            &run_config(g)?,
            &checkpoint,
            features.as_deref(),
            raw_weights,
            g.threads,
            &out("predictions.json"),
        ),
        Command::Eval {
            inputs,
            thresholds,
            preset,
            pr_csv,
        } => {
            let cfg = g.config.as_deref().map(RunConfig::load).transpose()?;
            let thresholds = commands::resolve_thresholds(thresholds.as_deref(), preset.as_deref(), cfg.as_ref())?;
            commands::eval_cmd(
                &inputs.predictions,
                &inputs.gt,
                inputs.subset.as_deref(),
                thresholds,
                pr_csv.as_deref(),
                g.out.as_deref(),
            )
        }
        Command::Profile { inputs } => {
            commands::profile_cmd(&inputs.predictions, &inputs.gt, inputs.subset.as_deref(), &out("profile"))
        }
        Command::Gradcheck => commands::gradcheck(g.seed.unwrap_or(0), g.out.as_deref()),
        Command::Ablate { axis, values } => {
            commands::ablate(&run_config(g)?, axis, &values, g.threads, &out("ablation"))
        }
    }
}

fn fail(err: &CliError) -> ExitCode {
    eprintln!("{}", err.to_json());
    ExitCode::from(err.kind.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::new(ErrorKind::Usage, e.to_string().trim_end())),
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if cli.global.threads == 0 {
        return fail(&CliError::new(ErrorKind::Usage, "--threads must be at least 1"));
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
