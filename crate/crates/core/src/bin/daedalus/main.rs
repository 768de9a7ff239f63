//! Command-line front end: scene generation, training, detection, attacks,
//! sweep grids and poster optimization.
//!
//! Exit codes: 0 ok, 1 usage error, 2 I/O error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use daedalus::Error;

#[derive(Parser)]
#[command(
    name = "daedalus",
    version,
    about = "Micro-scale lab for NMS-breaking adversarial examples on object detectors"
)]
struct Cli {
    /// Optional key=value config file ('#' comments); flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes (PNG + JSON ground truth).
    GenScenes(GenScenesArgs),
    /// Train a micro detector on a scene directory.
    Train(TrainArgs),
    /// Run the L2 or L0 attack on one image.
    Attack(AttackArgs),
    /// Detect objects in an image and emit JSON boxes.
    Detect(DetectArgs),
    /// Run the (gamma x NMS-threshold) evaluation grid to CSV.
    Sweep(SweepArgs),
    /// Optimize a perturbation poster under random transformations.
    Poster(PosterArgs),
}

#[derive(Args)]
struct GenScenesArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scene side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene directory (from gen-scenes).
    #[arg(long)]
    scenes: PathBuf,
    /// Detector variant: A, B or C.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of scenes held out for the mAP summary.
    #[arg(long)]
    holdout_frac: Option<f64>,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    /// Model file(s), comma-separated for an ensemble.
    #[arg(long)]
    model: String,
    #[arg(long)]
    image: PathBuf,
    /// l2 or l0.
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    /// "all" or a comma-separated class list.
    #[arg(long)]
    targets: Option<String>,
    /// f1, f2 or f3.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    binary_steps: Option<usize>,
    #[arg(long)]
    l0_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Adversarial PNG output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-iteration trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Box-confidence threshold.
    #[arg(long)]
    objectness: Option<f64>,
    #[arg(long)]
    nt: Option<f64>,
    /// hard, soft-linear or soft-gaussian.
    #[arg(long)]
    nms: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    score_floor: Option<f64>,
    #[arg(long)]
    defence_min_area: Option<f64>,
    /// Detections JSON output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Model file(s), comma-separated; the first is the detection victim.
    #[arg(long)]
    model: String,
    #[arg(long)]
    scenes: PathBuf,
    /// Gamma grid: comma list or start:end:step. 0 rows are benign.
    #[arg(long)]
    gammas: Option<String>,
    /// NMS-threshold grid: comma list or start:end:step.
    #[arg(long)]
    nts: Option<String>,
    #[arg(long)]
    nms: Option<String>,
    #[arg(long)]
    defence_min_area: Option<f64>,
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    targets: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    binary_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-scene attacks.
    #[arg(long)]
    jobs: Option<usize>,
    /// Report CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PosterArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// Model file(s), comma-separated for an ensemble.
    #[arg(long)]
    model: String,
    /// Poster side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// SNPS sample rate in (0, 1].
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    samples_per_step: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    palette_size: Option<usize>,
    #[arg(long)]
    targets: Option<String>,
    /// Poster PNG output path.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => 1,
        Error::Io { .. } | Error::Image { .. } | Error::Format { .. } => 2,
        Error::Tape(_) | Error::Numeric(_) | Error::TrainDiverged { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version are not usage errors
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };

    let cfg = match &cli.config {
        None => config::ConfigFile::default(),
        Some(path) => match config::ConfigFile::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(exit_code_for(&e));
            }
        },
    };

    let result = match cli.command {
        Command::GenScenes(args) => commands::gen_scenes(args, &cfg),
        Command::Train(args) => commands::train(args, &cfg),
        Command::Attack(args) => commands::attack(args, &cfg),
        Command::Detect(args) => commands::detect(args, &cfg),
        Command::Sweep(args) => commands::sweep(args, &cfg),
        Command::Poster(args) => commands::poster(args, &cfg),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
