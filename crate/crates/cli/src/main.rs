//! `mdsvm`: synthesis, training, two-stage segmentation, evaluation and
//! self-verification from the command line.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::error;
use mdsvm_core::Error;

use crate::config::Dims;
use crate::manifest::RunManifest;

pub const EXIT_VERIFY_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_UNDEFINED_METRIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "mdsvm",
    version,
    about = "Coronary artery segmentation with snake convolutions and state-space decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Where to write the run manifest (each command has a default next to its outputs).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic tube volumes with labels.
    Synth(SynthArgs),
    /// Train the coarse (stage 1) or fine (stage 2) network.
    Train(TrainArgs),
    /// Run two-stage inference on one volume.
    Segment(SegmentArgs),
    /// Score a predicted label volume against a reference.
    Eval(EvalArgs),
    /// Run the built-in property suites.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Volume extents H W D, each a multiple of 16.
    #[arg(long, num_args = 3, value_names = ["H", "W", "D"])]
    pub shape: Option<Vec<usize>>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tubes: Option<usize>,
    #[arg(long)]
    pub branch_depth: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub contrast: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct NetArgs {
    /// Channel ladder, e.g. 16,32,64,128,256.
    #[arg(long)]
    pub ladder: Option<Dims>,
    #[arg(long)]
    pub c_max: Option<usize>,
    #[arg(long)]
    pub expand: Option<usize>,
    #[arg(long)]
    pub state_dim: Option<usize>,
    #[arg(long)]
    pub dense_skips: Option<bool>,
    #[arg(long)]
    pub transposed_head: Option<bool>,
    /// Chunk length for the chunked scan; 0 selects the sequential scan.
    #[arg(long)]
    pub scan_chunk: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GuidanceArg {
    Coarse,
    Truth,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub stage: Option<u8>,
    /// Directory of `case_XXXX.img.mdsv` / `case_XXXX.lbl.mdsv` pairs.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path; the loss trace goes to `<out>.loss.tsv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Epochs at which the learning rate decays, e.g. 30,40.
    #[arg(long)]
    pub milestones: Option<Dims>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `dice` or `focal`.
    #[arg(long)]
    pub loss: Option<String>,
    /// Stop once an epoch's hard Dice exceeds this value.
    #[arg(long)]
    pub stop_at_dice: Option<f64>,
    #[arg(long, num_args = 3, value_names = ["H", "W", "D"])]
    pub coarse_shape: Option<Vec<usize>>,
    #[arg(long)]
    pub block_side: Option<usize>,
    /// Stage-2 block guidance source.
    #[arg(long, value_enum)]
    pub guidance: Option<GuidanceArg>,
    /// Stage-1 checkpoint, required for coarse guidance.
    #[arg(long)]
    pub model1: Option<PathBuf>,
    #[arg(long)]
    pub pos_per_neg: Option<usize>,
    #[command(flatten)]
    pub net: NetArgs,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model1: Option<PathBuf>,
    #[arg(long)]
    pub model2: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write one grayscale PGM per axial slice of the prediction.
    #[arg(long)]
    pub export_slices: Option<PathBuf>,
    #[arg(long, num_args = 3, value_names = ["H", "W", "D"])]
    pub coarse_shape: Option<Vec<usize>>,
    #[arg(long)]
    pub block_side: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f32>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    None,
    DiceSign,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// gradcheck, oracle, pipeline or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// Seeds per gradient case (instance multiplier for the other suites).
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Deliberately break an operator to show the suite catches it.
    #[arg(long, value_enum, default_value = "none", hide = true)]
    pub inject_fault: FaultArg,
}

/// A command's failure, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Verification(_) => EXIT_VERIFY_FAILED,
            Failure::Core(Error::NonFinite(_)) => EXIT_NUMERIC,
            Failure::Core(Error::UndefinedMetric(_)) => EXIT_UNDEFINED_METRIC,
            Failure::Core(_) => EXIT_USAGE,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Verification(m) => m.clone(),
        }
    }
}

fn configure_threads() {
    let Ok(raw) = std::env::var("MDSVM_THREADS") else {
        return;
    };
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size the worker pool: {e}");
            }
        }
        _ => log::warn!("ignoring MDSVM_THREADS={raw:?}: expected a positive integer"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    configure_threads();
    let (name, default_manifest) = match &cli.command {
        Command::Synth(a) => ("synth", a.out.as_ref().map(|o| o.join("manifest.json"))),
        Command::Train(a) => ("train", a.out.as_ref().map(|o| commands::sibling(o, "manifest.json"))),
        Command::Segment(a) => (
            "segment",
            a.output.as_ref().map(|o| commands::sibling(o, "manifest.json")),
        ),
        Command::Eval(a) => ("eval", Some(commands::sibling(&a.pred, "eval.manifest.json"))),
        Command::Verify(_) => ("verify", None),
    };
    let mut manifest = RunManifest::new(name);
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, &mut manifest),
        Command::Train(a) => commands::train(a, &mut manifest),
        Command::Segment(a) => commands::segment(a, &mut manifest),
        Command::Eval(a) => commands::eval(a, &mut manifest),
        Command::Verify(a) => commands::verify(a, &mut manifest),
    };
    let (code, message) = match &result {
        Ok(()) => (0, None),
        Err(f) => {
            error!("{}", f.message());
            if matches!(f, Failure::Core(Error::Config(_))) {
                if let Some(sub) = Cli::command().find_subcommand_mut(name) {
                    eprintln!("{}", sub.render_usage());
                }
            }
            (f.exit_code(), Some(f.message()))
        }
    };
    if let Some(path) = cli.manifest.or(default_manifest) {
        if let Err(e) = manifest.finish(&path, i32::from(code), message) {
            error!("could not write manifest {}: {e}", path.display());
        }
    }
    ExitCode::from(code)
}
