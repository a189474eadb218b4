use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fastref::coreset::StartRule;
use fastref::refine::{EpsilonRule, RefineConfig};
use fastref::Metric;

#[derive(Debug, Parser)]
#[command(
    name = "fastref",
    version,
    about = "Prototype refinement for few-shot anomaly detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic support set, query maps, masks and manifest.
    Synth(SynthArgs),
    /// Select the prototype bank from support features by coreset.
    BuildPrototypes(BuildArgs),
    /// Refine the bank per query and write score maps plus image scores.
    Score(ScoreArgs),
    /// As `score`, with a baseline in place of the refinement (default ttt).
    Baseline(ScoreArgs),
    /// Image- and pixel-level AUROC of a scoring run.
    Eval(EvalArgs),
    /// Time refinement and scoring on random data.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Euclidean,
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    /// The refinement itself.
    None,
    /// Least-squares transform only (no transport term).
    Lstsq,
    /// Mean alignment instead of transport.
    Ttt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StartArg {
    SeededRandom,
    IndexZero,
}

impl From<StartArg> for StartRule {
    fn from(s: StartArg) -> Self {
        match s {
            StartArg::SeededRandom => StartRule::SeededRandom,
            StartArg::IndexZero => StartRule::IndexZero,
        }
    }
}

fn parse_epsilon(s: &str) -> Result<EpsilonRule, String> {
    if s == "auto" {
        return Ok(EpsilonRule::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(EpsilonRule::Fixed(v)),
        _ => Err(format!("expected \"auto\" or a positive number, got {s:?}")),
    }
}

fn parse_threads(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

/// Optimizer settings shared by `score`, `baseline` and `bench`.
#[derive(Debug, Clone, Args)]
pub struct RefineArgs {
    #[arg(long, value_enum, default_value = "euclidean")]
    pub metric: MetricArg,
    /// Balance coefficient; 0.3 for euclidean, 0.1 for cosine when omitted.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub outer_iters: usize,
    #[arg(long, default_value_t = 10)]
    pub sinkhorn_iters: usize,
    /// Entropic strength, or `auto` for 0.05 x median cost.
    #[arg(long, default_value = "auto", value_parser = parse_epsilon)]
    pub epsilon: EpsilonRule,
    #[arg(long, default_value_t = 1e-6)]
    pub ridge: f64,
}

impl RefineArgs {
    pub fn config(&self) -> RefineConfig {
        let metric = Metric::from(self.metric);
        let mut cfg = RefineConfig::new(metric);
        cfg.lambda = self.lambda.unwrap_or(metric.default_lambda());
        cfg.outer_iters = self.outer_iters;
        cfg.inner_iters = self.sinkhorn_iters;
        cfg.epsilon = self.epsilon;
        cfg.ridge = self.ridge;
        cfg
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Outlier-free query images.
    #[arg(long, default_value_t = 10)]
    pub normal: usize,
    /// Query images with planted outlier patches.
    #[arg(long, default_value_t = 10)]
    pub anomalous: usize,
    /// Planted patches per anomalous image.
    #[arg(long, default_value_t = 4)]
    pub outliers: usize,
    #[arg(long, default_value_t = 6.0)]
    pub shift: f64,
    /// Patch grid side; queries have grid x grid patches.
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    /// Support rows.
    #[arg(long, default_value_t = 64)]
    pub support: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    /// Pixels per patch side in the masks and image size.
    #[arg(long, default_value_t = 4)]
    pub upscale: usize,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Support feature tensors (FTZ, rank 2 or 3); rows are concatenated.
    #[arg(long, required = true, num_args = 1..)]
    pub support: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "euclidean")]
    pub metric: MetricArg,
    /// Coreset sampling ratio.
    #[arg(long, default_value_t = 0.05)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "seeded-random")]
    pub start: StartArg,
    /// Bank FTZ to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// JSON-lines manifest of query tensors.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for `scores.json` and `maps/`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub refine: RefineArgs,
    /// Gaussian smoothing of the upsampled map.
    #[arg(long, default_value_t = fastref::scoring::DEFAULT_SIGMA)]
    pub sigma: f64,
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    #[arg(long, default_value = "1", value_parser = parse_threads)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `scores.json` written by `score` or `baseline`.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 1024)]
    pub m: usize,
    #[arg(long, default_value_t = 102)]
    pub n: usize,
    #[arg(long, default_value_t = 640)]
    pub c: usize,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub refine: RefineArgs,
    #[arg(long, default_value = "1", value_parser = parse_threads)]
    pub threads: usize,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
