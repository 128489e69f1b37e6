//! `duge`: dataset synthesis, source training, decremental unlearning,
//! evaluation and reporting.
//!
//! Exit codes: 0 success, 1 user error (bad config, missing upstream artifact,
//! refused overwrite), 2 internal error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use duge_core::config::ExperimentConfig;
use duge_core::duge::{DecrementalPlan, Method};
use duge_core::pipeline::{resolve_output, Pipeline};
use duge_core::CoreError;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "duge", version, about = "Continual concept unlearning for a toy diffusion model")]
struct Cli {
    /// Experiment config (TOML); omitted sections take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Output root. Falls back to the config's `output`, then $DUGE_OUT, then `out`.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,

    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the glyph train/validation sets.
    Dataset {
        /// Overwrite a non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the source diffusion model θ^0.
    Train,
    /// Train and validate the evaluation classifier.
    Classifier,
    /// Remove the plan's concepts one step at a time.
    Unlearn {
        #[arg(long, default_value = "duge")]
        method: Method,
        /// Decremental plan (TOML) replacing the config's `[plan]`.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Run name under `unlearn/`; defaults to the method.
        #[arg(long)]
        name: Option<String>,
    },
    /// Score unlearning runs against the source model.
    Eval {
        /// Runs to evaluate; all runs when omitted.
        #[arg(long = "run")]
        runs: Vec<String>,
    },
    /// Collate evaluated runs into tables and sample grids.
    Report,
    /// Every stage in order with the default DUGE and naive runs.
    Run {
        /// Overwrite a non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Print the resolved config.
    Config,
}

fn load_config(path: Option<&PathBuf>) -> duge_core::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_plan(path: &PathBuf) -> duge_core::Result<DecrementalPlan> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(toml::from_str(&text)?)
}

fn execute(cli: Cli) -> duge_core::Result<()> {
    let config = load_config(cli.config.as_ref())?;
    if let Command::Config = cli.command {
        config.validate()?;
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let root = resolve_output(cli.out.clone(), &config);
    let mut pipeline = Pipeline::new(config, root)?;
    pipeline.quiet = cli.quiet;
    match cli.command {
        Command::Dataset { force } => pipeline.dataset(force),
        Command::Train => pipeline.train(),
        Command::Classifier => pipeline.classifier(),
        Command::Unlearn { method, plan, name } => {
            let plan = plan.as_ref().map(load_plan).transpose()?;
            pipeline.unlearn(method, plan, name.as_deref()).map(|_| ())
        }
        Command::Eval { runs } => pipeline.eval(&runs).map(|_| ()),
        Command::Report => pipeline.report(),
        Command::Run { force } => pipeline.run_all(force),
        Command::Config => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
