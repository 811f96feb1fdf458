//! Command-line surface: one subcommand per pipeline stage.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::manifest::Artifacts;
use crate::pipeline::{self, Run};
use crate::runner::default_workers;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pmdef", version, about = "Prediction-matching autoencoder defence against adversarial inputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for attack generation (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the classifier on the training set.
    TrainClassifier(Common),
    /// Train one autoencoder per configured defence against the frozen classifier.
    TrainDefence(Common),
    /// Generate adversarial batches on the test set.
    Attack(Common),
    /// Write per-instance verdicts for the clean test set and every attack.
    Score(Common),
    /// Calibrate each defence's detection threshold on normal data.
    Calibrate(Common),
    /// Accuracy tables (and the checkpoint ensemble, when configured).
    Evaluate(Common),
    /// Harmful versus not-harmful score analysis under corruptions.
    Drift(Common),
    /// ROC curves and AUC of the adversarial score.
    Roc(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::TrainClassifier(c) => ("train-classifier", c),
            Command::TrainDefence(c) => ("train-defence", c),
            Command::Attack(c) => ("attack", c),
            Command::Score(c) => ("score", c),
            Command::Calibrate(c) => ("calibrate", c),
            Command::Evaluate(c) => ("evaluate", c),
            Command::Drift(c) => ("drift", c),
            Command::Roc(c) => ("roc", c),
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("PMDEF_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `argv` (including the program name), runs the stage and returns
/// the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(manifest) => {
            log::info!("manifest written to {}", manifest.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn execute(command: &Command) -> Result<PathBuf> {
    let (name, common) = command.parts();
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    let seed = common.seed.unwrap_or(config.seed);
    let workers = match common.workers {
        Some(0) => return Err(Error::Config("--workers must be at least 1".into())),
        Some(w) => w,
        None => default_workers(),
    };
    let mut arts = Artifacts::new(&config.out_dir);
    let run = Run { config, seed, workers };
    log::info!("{name}: seed {seed}, {workers} workers, output {}", arts.out_dir().display());
    let stage = match command {
        Command::TrainClassifier(_) => pipeline::train_classifier_stage,
        Command::TrainDefence(_) => pipeline::train_defence_stage,
        Command::Attack(_) => pipeline::attack_stage,
        Command::Score(_) => pipeline::score_stage,
        Command::Calibrate(_) => pipeline::calibrate_stage,
        Command::Evaluate(_) => pipeline::evaluate_stage,
        Command::Drift(_) => pipeline::drift_stage,
        Command::Roc(_) => pipeline::roc_stage,
    };
    stage(&run, &mut arts)?;
    arts.finish(name, seed, &run.config)
}
