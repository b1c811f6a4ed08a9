//! `ddyn` command-line interface.
//!
//! Every subcommand writes its outputs under `--out DIR`. The exit status is
//! 0 when the command succeeded and every requested check passed, 1 when a
//! check failed, and 2 on any error.

mod analyze;
mod checks;
mod loss;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distill::{DistillError, KlDirection, LayerSelection};
use crate::infodyn::{InfoError, RangeMode};
use crate::io_util::{to_json_bytes, write_atomic, write_atomic_bytes};
use crate::synth::SynthError;
use crate::tensor::{ClsPolicy, TensorError};

pub use analyze::{cmd_analyze, ReportBundle};
pub use checks::{cmd_fit, cmd_gradcheck, cmd_synth};
pub use loss::cmd_loss;

pub const TOOL: &str = concat!("ddyn ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Info(#[from] InfoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Usage(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    CheckFailed,
}

#[derive(Debug, Parser)]
#[command(
    name = "ddyn",
    version,
    about = "Activation spectra, entropy profiles and distillation losses"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Channel spectra, entropy and magnitude profiles of one activation stack.
    Analyze(AnalyzeArgs),
    /// Logit and feature distillation losses between a student and a teacher.
    Loss(LossArgs),
    /// Finite-difference checks of the analytic loss gradients.
    Gradcheck(GradcheckArgs),
    /// Gradient descent on free features against the frequency loss.
    Fit(FitArgs),
    /// Write a synthetic fixture stack and its expected analysis values.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RangeArg {
    Global,
    PerLayer,
}

impl From<RangeArg> for RangeMode {
    fn from(r: RangeArg) -> Self {
        match r {
            RangeArg::Global => RangeMode::Global,
            RangeArg::PerLayer => RangeMode::PerLayer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClsArg {
    Dropped,
    Folded,
}

impl From<ClsArg> for ClsPolicy {
    fn from(c: ClsArg) -> Self {
        match c {
            ClsArg::Dropped => ClsPolicy::Dropped,
            ClsArg::Folded => ClsPolicy::Folded,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Histogram bins for the entropy analysis.
    #[arg(long, default_value_t = 100)]
    pub bins: usize,
    #[arg(long, value_enum, default_value_t = RangeArg::Global)]
    pub range: RangeArg,
    /// Require the manifest's class-token policy to match.
    #[arg(long, value_enum)]
    pub cls: Option<ClsArg>,
    /// Per-step tolerance for U-shape detection; defaults to 2% of each profile's range.
    #[arg(long)]
    pub u_tolerance: Option<f64>,
    /// Log-magnitude slope per bin below which a spectrum counts as low-pass.
    #[arg(long, default_value_t = -0.01, allow_hyphen_values = true)]
    pub slope_threshold: f64,
    #[arg(long, default_value_t = 1e-12)]
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMethod {
    /// Frequency alignment of stacked spatial spectra.
    Spectral,
    /// Learnable per-position channel projection.
    Projector,
    /// Logits only; feature pairs are skipped.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorInit {
    Identity,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KlArg {
    Teacher,
    Student,
}

impl From<KlArg> for KlDirection {
    fn from(k: KlArg) -> Self {
        match k {
            KlArg::Teacher => KlDirection::TeacherReference,
            KlArg::Student => KlDirection::StudentReference,
        }
    }
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long)]
    pub student: PathBuf,
    #[arg(long)]
    pub teacher: PathBuf,
    /// JSON `{"logits": [[..]], "labels": [..]}`.
    #[arg(long)]
    pub student_logits: PathBuf,
    #[arg(long)]
    pub teacher_logits: PathBuf,
    /// JSON array of class indices; overrides labels in the logits files.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = FeatureMethod::Spectral)]
    pub method: FeatureMethod,
    #[arg(long, default_value_t = 0.9)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = LayerSelection::default(), value_parser = parse_selection)]
    pub layers: LayerSelection,
    /// Entropy bin count, echoed for downstream analyses.
    #[arg(long, default_value_t = 100)]
    pub bins: usize,
    #[arg(long, value_enum, default_value_t = KlArg::Teacher)]
    pub kl_direction: KlArg,
    #[arg(long, value_enum, default_value_t = ProjectorInit::Identity)]
    pub projector_init: ProjectorInit,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write gradient tensors as `.npy` files.
    #[arg(long)]
    pub dump_gradients: bool,
}

fn parse_selection(s: &str) -> Result<LayerSelection, String> {
    s.parse().map_err(|e: DistillError| e.to_string())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check every objective.
    #[arg(long, conflicts_with = "op")]
    pub all: bool,
    /// One of kd_loss, freq_loss, proj_loss, total.
    #[arg(long)]
    pub op: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitInit {
    Zero,
    Teacher,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Manifest to take the target layer from; a seeded random target is used otherwise.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Shape `B,C,H,W` of the random target.
    #[arg(long, default_value = "1,4,4,4")]
    pub shape: String,
    /// Student channel count; defaults to the target's.
    #[arg(long)]
    pub student_channels: Option<usize>,
    #[arg(long, value_enum, default_value_t = FitInit::Zero)]
    pub init: FitInit,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fail unless the final feature MSE is at most this.
    #[arg(long)]
    pub max_mse: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Constant,
    OnePerBin,
    Sinusoid,
    Lowpass,
    UProfile,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F4,
    F8,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    /// `L,B,C,H,W`.
    #[arg(long, default_value = "4,2,16,4,4")]
    pub shape: String,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub value: f64,
    #[arg(long, default_value_t = 1)]
    pub k0: usize,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 0.3)]
    pub rate: f64,
    /// Comma-separated per-layer spreads for `u-profile`.
    #[arg(long)]
    pub levels: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DtypeArg::F8)]
    pub dtype: DtypeArg,
    #[arg(long, value_enum, default_value_t = ClsArg::Dropped)]
    pub cls: ClsArg,
    #[arg(long)]
    pub out: PathBuf,
}

pub(crate) fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|p| p.trim().parse::<T>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Usage(format!("cannot parse {what} `{s}`")))
}

pub(crate) fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let bytes = to_json_bytes(value).map_err(|source| CliError::Json {
        path: path.display().to_string(),
        source,
    })?;
    write_atomic_bytes(path, &bytes).map_err(|e| CliError::io(path, e))
}

pub(crate) fn write_csv_file<F>(path: &Path, fill: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn std::io::Write) -> csv::Result<()>,
{
    write_atomic(path, |w| fill(w).map_err(std::io::Error::other)).map_err(|e| CliError::io(path, e))
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Analyze(args) => cmd_analyze(&args).map(|_| Outcome::Passed),
        Command::Loss(args) => cmd_loss(&args).map(|_| Outcome::Passed),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Fit(args) => cmd_fit(&args),
        Command::Synth(args) => cmd_synth(&args).map(|_| Outcome::Passed),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(Outcome::Passed) => 0,
        Ok(Outcome::CheckFailed) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
