use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::warn;

use emolens::dataset::SplitMode;
use emolens::metrics::{percent, summary_text, ConfusionMatrix};
use emolens::nn::gradcheck::{grad_check, tiny_problem};
use emolens::nn::Checkpoint;
use emolens::pipeline::{Pipeline, PipelineConfig};
use emolens::train::{predict, PngFiles, BEST_CHECKPOINT};
use emolens::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "emolens", version, about = "Spectrogram lens augmentation and CNN emotion classification")]
struct Cli {
    /// JSON pipeline config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthesis, lens sampling, splitting and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    split_mode: Option<SplitModeArg>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    width_scale: Option<f64>,
    /// Replace existing stage outputs.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Worker threads for per-file stages and evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitModeArg {
    Grouped,
    RandomItem,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic WAV corpus and its manifest.
    Synth,
    /// Render the unaugmented spectrogram of every corpus WAV.
    Spectrogram,
    /// Write the lens-augmented images and manifest.
    Augment,
    /// Assign train/val/test splits to the augmented manifest.
    Split,
    /// Train on the split manifest.
    Train,
    /// Evaluate the trained checkpoint on the test split, or print the
    /// accuracies of a stored confusion matrix.
    Eval {
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
    /// Classify one WAV file.
    Predict {
        wav: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of backpropagation on a small network.
    Gradcheck {
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Train and test under random-item and grouped splits and compare.
    ExperimentLeakage,
    /// Run synth (unless a corpus is configured), augment, split, train and eval.
    Run,
    /// Print the effective config as JSON.
    Config,
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if let Some(dir) = &cli.work_dir {
        cfg.paths.work_dir = dir.clone();
    }
    if let Some(mode) = cli.split_mode {
        cfg.split.mode = match mode {
            SplitModeArg::Grouped => SplitMode::GroupedByParent,
            SplitModeArg::RandomItem => SplitMode::RandomItem,
        };
    }
    if let Some(epochs) = cli.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(scale) = cli.width_scale {
        cfg.model.width_scale = scale;
    }
    cfg.validate()?;
    Ok(cfg)
}

enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = effective_config(&cli)?;
    if cfg.split.mode == SplitMode::RandomItem && matches!(cli.command, Command::Split | Command::Run) {
        eprintln!("WARNING: random-item splitting over augmented data leaks siblings of one utterance across train and test; reported test accuracy will be optimistic");
    }
    let pipeline = Pipeline::new(cfg, cli.overwrite)?;
    let cfg = &pipeline.cfg;
    match cli.command {
        Command::Synth => {
            let m = pipeline.synth()?;
            println!("{} utterances written to {}", m.entries.len(), cfg.corpus_dir().display());
        }
        Command::Spectrogram => {
            let n = pipeline.spectrogram()?;
            println!("{n} spectrograms written to {}", cfg.dir("spectrograms").display());
        }
        Command::Augment => {
            let m = pipeline.augment()?;
            println!("{} augmented images written to {}", m.entries.len(), cfg.dir("augmented").display());
        }
        Command::Split => {
            let m = pipeline.split()?;
            print!("{}", m.split_summary_csv()?);
            println!("straddling parents: {}", m.straddling_parents().len());
        }
        Command::Train => {
            let (ckpt, history) = pipeline.train(&PngFiles)?;
            match history.iter().find(|r| r.epoch == ckpt.epoch) {
                Some(best) => println!("best epoch {} with val accuracy {}", best.epoch, percent(best.val_accuracy)),
                None => println!("no epochs run; initial checkpoint saved"),
            }
        }
        Command::Eval { fixture: Some(path) } => {
            let cm = ConfusionMatrix::read_csv(path)?;
            print!("{}", summary_text(&cm)?);
        }
        Command::Eval { fixture: None } => {
            let cm = pipeline.eval(&PngFiles)?;
            print!("{}", summary_text(&cm)?);
        }
        Command::Predict { wav, checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| cfg.dir("train").join(BEST_CHECKPOINT));
            let ckpt = Checkpoint::load(path)?;
            let p = predict(&ckpt, wav)?;
            println!("{}", serde_json::to_string(&p).map_err(Error::from)?);
        }
        Command::Gradcheck { eps, tolerance } => {
            let (model, x, labels) = tiny_problem(cfg.train.seed);
            let report = grad_check(&model, &x, &labels, eps)?;
            println!(
                "max relative error {:.3e} over {} parameters ({} negligible skipped)",
                report.max_rel_error, report.checked, report.skipped
            );
            if !report.passes(tolerance) {
                return Err(Failure::Check(format!("gradient check failed: {:.3e} >= {tolerance:.1e}", report.max_rel_error)));
            }
        }
        Command::ExperimentLeakage => {
            let r = pipeline.leakage_experiment()?;
            println!("random_item test accuracy: {} ({} straddling parents)", percent(r.random_item.test_accuracy), r.random_item.straddling_parents);
            println!("grouped     test accuracy: {} ({} straddling parents)", percent(r.grouped.test_accuracy), r.grouped.straddling_parents);
            println!("gap: {:+.2} points", r.gap * 100.0);
        }
        Command::Run => {
            let cm = pipeline.run_all()?;
            print!("{}", summary_text(&cm)?);
        }
        Command::Config => print!("{}", cfg.to_json()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            eprintln!("{first}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            warn!("could not size worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Diverged { .. }) { EXIT_DIVERGED } else { EXIT_DATA })
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
