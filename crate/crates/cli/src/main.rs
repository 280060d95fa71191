//! `confmask` command-line tool.

mod commands;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use confmask::{CalibrationMode, KernelSpec, MetricSpec, ScoreConfig, WorldConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "confmask", version, about = "Conformal confidence masks for generative upscaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of low/high resolution pairs.
    GenerateSynthetic(GenerateArgs),
    /// Compute score maps for dataset pairs.
    Score(ScoreCmdArgs),
    /// Compute local difference maps between predictions and ground truth.
    Fidelity(FidelityCmdArgs),
    /// Calibrate a score threshold and write a calibration record.
    Calibrate(CalibrateArgs),
    /// Threshold a score map into a mask and render an overlay.
    Mask(MaskArgs),
    /// Evaluate a calibration record on held-out pairs.
    Evaluate(EvaluateArgs),
    /// Monte Carlo checks of the guarantees.
    Simulate {
        #[command(subcommand)]
        experiment: SimulateCommand,
    },
    /// Tint the untrusted pixels of an image red.
    Overlay(OverlayArgs),
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected START:END, got {s:?}"))?;
    let a = a.parse().map_err(|_| format!("bad range start {a:?}"))?;
    let b = b.parse().map_err(|_| format!("bad range end {b:?}"))?;
    Ok((a, b))
}

#[derive(Args, Serialize, Clone)]
pub struct WorldArgs {
    #[arg(long, default_value_t = 16)]
    pub lr_width: usize,
    #[arg(long, default_value_t = 16)]
    pub lr_height: usize,
    /// Upscaling factor, 2 or 4.
    #[arg(long, default_value_t = 2)]
    pub factor: usize,
    #[arg(long, default_value_t = 2)]
    pub bumps_min: usize,
    #[arg(long, default_value_t = 5)]
    pub bumps_max: usize,
    #[arg(long, default_value_t = 0.08)]
    pub texture_amplitude: f64,
    #[arg(long, default_value_t = 0.004)]
    pub noise_base: f64,
    #[arg(long, default_value_t = 0.6)]
    pub noise_gradient: f64,
}

impl WorldArgs {
    pub fn world(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            seed,
            lr_width: self.lr_width,
            lr_height: self.lr_height,
            factor: self.factor,
            bumps_min: self.bumps_min,
            bumps_max: self.bumps_max,
            texture_amplitude: self.texture_amplitude,
            noise_base: self.noise_base,
            noise_gradient: self.noise_gradient,
        }
    }
}

#[derive(Args, Serialize, Clone)]
pub struct ScoreArgs {
    /// Number of model draws per image.
    #[arg(long, default_value_t = 8)]
    pub draws: usize,
    /// Kernel inside the variance: box:R, gaussian:S or gaussian:S:R.
    #[arg(long, default_value = "box:2")]
    pub kernel: KernelSpec,
    /// Gaussian sigma of the final blur.
    #[arg(long, default_value_t = 2.0)]
    pub post_blur: f64,
    /// Skip the final blur.
    #[arg(long)]
    pub no_post_blur: bool,
}

impl ScoreArgs {
    pub fn config(&self) -> anyhow::Result<ScoreConfig> {
        let cfg = ScoreConfig {
            draws: self.draws,
            kernel: self.kernel,
            post_blur: (!self.no_post_blur).then_some(self.post_blur),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Serialize, Clone)]
pub struct MetricArgs {
    /// pointwise, neighborhood, neighborhood:<kernel> or semantic.
    #[arg(long, default_value = "pointwise")]
    pub metric: String,
    /// Kernel of the neighborhood metric when `--metric neighborhood`.
    #[arg(long, default_value = "box:1")]
    pub metric_kernel: KernelSpec,
}

impl MetricArgs {
    pub fn spec(&self) -> anyhow::Result<MetricSpec> {
        Ok(match self.metric.as_str() {
            "neighborhood" => MetricSpec::parse("neighborhood", Some(self.metric_kernel))?,
            other => other.parse()?,
        })
    }
}

#[derive(Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Constant images and a noiseless model whose output equals the truth.
    #[arg(long)]
    pub perfect: bool,
    /// Also render the prediction and this many model draws per pair.
    #[arg(long)]
    pub with_draws: Option<usize>,
    #[command(flatten)]
    pub world: WorldArgs,
}

#[derive(Args, Serialize)]
pub struct ScoreCmdArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Pair indices START:END, end exclusive. Defaults to all pairs.
    #[arg(long, value_parser = parse_range)]
    pub range: Option<(usize, usize)>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
}

#[derive(Args, Serialize)]
pub struct FidelityCmdArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_parser = parse_range)]
    pub range: Option<(usize, usize)>,
    /// Directory of NNNN.png annotations for the semantic metric.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    pub metric: MetricArgs,
}

#[derive(Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_parser = parse_range)]
    pub range: Option<(usize, usize)>,
    #[arg(long)]
    pub alpha: f64,
    /// conservative or sup.
    #[arg(long, default_value = "conservative")]
    pub mode: CalibrationMode,
    /// Precomputed score maps (output of `score`) instead of model draws.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Precomputed difference maps (output of `fidelity`).
    #[arg(long)]
    pub fidelity: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Also run the brute-force solver and fail unless both agree.
    #[arg(long)]
    pub verify: bool,
    /// Use the brute-force solver.
    #[arg(long)]
    pub bruteforce: bool,
    /// Allow alpha up to 3.
    #[arg(long)]
    pub extended_alpha: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[command(flatten)]
    pub metric: MetricArgs,
}

#[derive(Args, Serialize)]
pub struct MaskArgs {
    #[arg(long)]
    pub record: PathBuf,
    /// Dataset to score; used with --index.
    #[arg(long, requires = "index")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<usize>,
    /// Score map file; its directory must hold the score_config.json sidecar.
    #[arg(long, conflicts_with = "dataset", requires = "prediction")]
    pub score: Option<PathBuf>,
    /// Prediction to draw the overlay on; used with --score.
    #[arg(long)]
    pub prediction: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub record: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_parser = parse_range)]
    pub range: Option<(usize, usize)>,
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct OverlayArgs {
    /// Mask PNG, 255 = trusted.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
pub struct SimCommon {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value = "conservative")]
    pub mode: CalibrationMode,
    #[command(flatten)]
    pub world: WorldArgs,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[command(flatten)]
    pub metric: MetricArgs,
}

#[derive(Args, Serialize)]
pub struct MultiAlphaArgs {
    /// Comma-separated risk levels.
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    pub alpha: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
    #[command(flatten)]
    pub common: SimCommon,
}

#[derive(Args, Serialize)]
pub struct LeakageArgs {
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 9)]
    pub n_new: usize,
    #[arg(long, default_value_t = 0)]
    pub n_leaked: usize,
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
    #[command(flatten)]
    pub common: SimCommon,
}

#[derive(Args, Serialize)]
pub struct CounterexampleArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Probability of a zero-error sample.
    #[arg(long)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    /// Defaults to tau/2.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub error: f64,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 2000)]
    pub trials: usize,
}

#[derive(Subcommand)]
pub enum SimulateCommand {
    Guarantee(MultiAlphaArgs),
    PsnrBound(MultiAlphaArgs),
    Leakage(LeakageArgs),
    AlphaSweep(MultiAlphaArgs),
    Counterexample(CounterexampleArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateSynthetic(a) => commands::generate(&a),
        Command::Score(a) => commands::score(&a),
        Command::Fidelity(a) => commands::fidelity(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Mask(a) => commands::mask(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Simulate { experiment } => commands::simulate(&experiment),
        Command::Overlay(a) => commands::overlay(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
