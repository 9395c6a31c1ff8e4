//! `planerect`: every pipeline stage behind one binary.
//!
//! Machine-readable results go to stdout, logs to stderr.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use planerect::dataset::SplitName;
use planerect::model::HeadKind;
use planerect::train::{Profile, RunConfig};
use planerect::{DisplacementVector, ErrorClass, Homography};

const EXIT_CODES: &str = "Exit codes: 0 success, 1 usage error, 2 data or invariant error, 3 numeric failure \
(singular system, non-finite loss or gradient).";

#[derive(Parser, Debug)]
#[command(name = "planerect", version, about = "Single-view shelf image rectification", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the homography of a displacement vector, or read a displacement
    /// vector off a homography.
    #[command(after_help = EXIT_CODES)]
    Convert(ConvertArgs),
    /// Warp an image to a fronto-parallel view.
    #[command(after_help = EXIT_CODES)]
    Rectify(RectifyArgs),
    /// Write a synthetic dataset (PNGs plus train/val/test manifests).
    #[command(after_help = EXIT_CODES)]
    Synth(SynthArgs),
    /// Per-corner displacement statistics of a manifest.
    #[command(after_help = EXIT_CODES)]
    Stats(StatsArgs),
    /// Write augmented variants of one dataset sample.
    #[command(after_help = EXIT_CODES)]
    AugmentPreview(AugmentPreviewArgs),
    /// Train the displacement regressor.
    #[command(after_help = EXIT_CODES)]
    Train(TrainArgs),
    /// Score a checkpoint, a prediction file or the zero baseline on a split.
    #[command(after_help = EXIT_CODES)]
    Eval(EvalArgs),
    /// Measure forward-pass latency of a checkpoint.
    #[command(after_help = EXIT_CODES)]
    Bench(BenchArgs),
    /// Run the annotation HTTP service.
    #[command(after_help = EXIT_CODES)]
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("input").required(true).args(["d", "matrix"])))]
struct ConvertArgs {
    /// Corner displacements d0..d3 (TL, TR, BR, BL) in pixels, comma or space separated.
    #[arg(long, allow_hyphen_values = true)]
    d: Option<DisplacementVector<f64>>,
    /// Nine row-major homography entries.
    #[arg(long, allow_hyphen_values = true)]
    matrix: Option<Homography<f64>>,
    /// Square frame size in pixels.
    #[arg(long, default_value_t = 224)]
    size: usize,
    /// Frame width, overriding --size.
    #[arg(long)]
    width: Option<usize>,
    /// Frame height, overriding --size.
    #[arg(long)]
    height: Option<usize>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["d", "manifest", "checkpoint"])))]
struct RectifyArgs {
    /// Input PNG.
    #[arg(long)]
    image: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Displacements at the image's own resolution.
    #[arg(long, allow_hyphen_values = true)]
    d: Option<DisplacementVector<f64>>,
    /// Manifest holding a record whose id is the image file stem.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint whose prediction is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Total number of images; a tenth each goes to val and test.
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 224)]
    size: usize,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("input").required(true).args(["manifest", "data"])))]
struct StatsArgs {
    /// Manifest file.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Dataset directory (used with --split).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: SplitName,
}

#[derive(Args, Debug)]
struct AugmentPreviewArgs {
    /// Dataset directory; the pool is built from its train split.
    #[arg(long)]
    data: PathBuf,
    /// Image id of the sample to augment.
    #[arg(long)]
    id: String,
    /// Number of variants.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Output directory for the PNGs and their manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Working resolution.
    #[arg(long, default_value_t = 224)]
    size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

fn profile_help(text: &str, key: &str) -> String {
    let value = |p| {
        RunConfig::profile(p).entries().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v).unwrap_or_default()
    };
    format!("{text} [paper: {}, desk: {}]", value(Profile::Paper), value(Profile::Desk))
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory with train.txt, val.txt and the PNGs.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path for the best-validation parameters.
    #[arg(long)]
    out: PathBuf,
    /// Training history path [default: <out>.history.txt].
    #[arg(long)]
    history: Option<PathBuf>,
    /// Hyperparameter set the flags below start from.
    #[arg(long, default_value = "paper")]
    profile: Profile,
    /// Config file of `key = value` lines applied after the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, help = profile_help("Training epochs", "train.epochs"))]
    epochs: Option<usize>,
    #[arg(long, help = profile_help("Mini-batch size", "train.batch_size"))]
    batch_size: Option<usize>,
    #[arg(long, help = profile_help("Initial learning rate", "train.lr0"))]
    lr: Option<f64>,
    #[arg(long, help = profile_help("Final learning rate of the cosine schedule", "train.lr_min"))]
    lr_min: Option<f64>,
    #[arg(long, help = profile_help("AdamW weight decay", "train.weight_decay"))]
    weight_decay: Option<f64>,
    #[arg(long, help = profile_help("Seed for initialization and shuffling", "train.seed"))]
    seed: Option<u64>,
    #[arg(long, help = profile_help("Augmentation probability", "augment.probability"))]
    augment_p: Option<f64>,
    #[arg(long, help = profile_help("Photometric loss weight", "loss.photometric_weight"))]
    photometric_weight: Option<f64>,
    #[arg(long, help = profile_help("Network input size", "model.input_size"))]
    input_size: Option<usize>,
    #[arg(long, help = profile_help("Regression head", "model.head"))]
    head: Option<HeadKind>,
    /// Regress raw pixel displacements instead of normalized targets.
    #[arg(long)]
    no_normalize: bool,
    /// Scalar type used for training; checkpoints always store f64.
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("method").required(true).multiple(true).args(["checkpoint", "predictions", "baseline"])))]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: SplitName,
    /// Checkpoint to run on every image.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// External predictions, `image_id d0 d1 d2 d3` per line at working resolution.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Add a row for always predicting zero displacement.
    #[arg(long)]
    baseline: bool,
    /// Resolution errors are measured at [default: the checkpoint's input size, else 224].
    #[arg(long)]
    working_size: Option<usize>,
    /// Exclude images whose error exceeds this many pixels (45 for the classical baseline protocol).
    #[arg(long)]
    threshold: Option<f64>,
    /// Row label for the checkpoint or prediction file.
    #[arg(long)]
    name: Option<String>,
    /// Also print one `image_id mce included` line per image.
    #[arg(long)]
    per_image: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image to time on [default: a synthetic scene at the input size].
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = planerect::eval::WARMUP_ITERATIONS)]
    warmup: usize,
    #[arg(long, default_value_t = planerect::eval::TIMED_ITERATIONS)]
    iterations: usize,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Directory of PNG images to annotate.
    #[arg(long)]
    images: PathBuf,
    /// Annotation store (a dataset manifest); created on first save.
    #[arg(long)]
    store: PathBuf,
    /// Checkpoint used for suggestions.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Resolution images are served and annotated at.
    #[arg(long, default_value_t = 224)]
    working_size: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(planerect::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.class() {
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<planerect::Error> for CliError {
    fn from(e: planerect::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Convert(a) => commands::convert(a),
        Command::Rectify(a) => commands::rectify(a),
        Command::Synth(a) => commands::synth(a),
        Command::Stats(a) => commands::stats(a),
        Command::AugmentPreview(a) => commands::augment_preview(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
