//! Command-line harness around `ega_core`: oracle and gradient checks, cost
//! reports, scaling sweeps and loss/metric evaluation on raster files.
//!
//! Every subcommand writes its reports plus `manifest.json` (SHA-256 of each
//! report) into `--out`. Randomness comes only from `--seed`.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod oracle;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ega_core::costmodel::{CostMetric, SweepAxis};
use ega_core::rig::parse_config;
use ega_core::{Preset, RigConfig};

pub use error::{CliError, Result};
pub use manifest::{FileDigest, Outputs, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "ega", version, about = "Efficient guided attention: checks, costs and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML rig description.
    #[arg(long, global = true, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named rig: LR, MR, HR, DDAD-LR, DDAD-MR or MINIMAL.
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    /// Overrides the seed of the config file; defaults to 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "ega-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Compare every block of the rig against a loop-based oracle, and check
    /// identity projection and neighbor locality. Default rig: LR.
    CheckAttention {
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
        /// Scale logits by 1/√c instead of 1/√(c/Z).
        #[arg(long)]
        literal_scale: bool,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Tape gradients against central differences for every block.
    /// Default rig: MINIMAL.
    CheckGrads {
        #[arg(long, default_value_t = ega_core::gradcheck::DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = ega_core::gradcheck::RELATIVE_TOLERANCE)]
        tolerance: f64,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Analytic FLOP and activation counts, guided vs joint attention.
    /// Default rig: LR.
    Cost,
    /// Cost along one axis (ns, ni, nt or ks). Default rig: LR.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated sweep values, at least three.
        #[arg(long, value_delimiter = ',', required = true)]
        points: Vec<usize>,
        /// `total` or a stage name (qkv, reduce, attnmap, softmax,
        /// weighted_sum, headmix).
        #[arg(long, default_value = "total")]
        metric: CostMetric,
    },
    /// Photometric, smoothness and total loss on raster files.
    EvalLoss {
        #[arg(long)]
        target: PathBuf,
        /// Synthesized views; repeat for several.
        #[arg(long, required = true)]
        candidate: Vec<PathBuf>,
        /// Predicted depth for the smoothness term.
        #[arg(long)]
        depth: Option<PathBuf>,
    },
    /// Depth metrics per camera plus their average.
    EvalDepth {
        /// Predicted depth rasters, one per camera.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// Ground-truth rasters in the same camera order.
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        #[arg(long, default_value_t = 80.0)]
        max_depth: f64,
        /// Evaluate raw predictions without median scaling.
        #[arg(long)]
        no_median_scaling: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ParamArgs {
    /// Load block parameters from a snapshot instead of seeding them.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Also write the parameters used to `params.bin`.
    #[arg(long)]
    pub save_params: bool,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::CheckAttention { .. } => "check-attention",
            Command::CheckGrads { .. } => "check-grads",
            Command::Cost => "cost",
            Command::Sweep { .. } => "sweep",
            Command::EvalLoss { .. } => "eval-loss",
            Command::EvalDepth { .. } => "eval-depth",
        }
    }
}

/// A rig together with where it came from and the effective seed.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub rig: RigConfig,
    pub source: String,
    pub seed: u64,
}

/// Loads `--config`, else `--preset`, else `fallback`.
pub fn resolve(common: &CommonArgs, fallback: Preset) -> Result<Resolved> {
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let loaded = parse_config(&text).map_err(|source| CliError::Input { path: path.clone(), source })?;
        return Ok(Resolved {
            rig: loaded.rig,
            source: path.display().to_string(),
            seed: common.seed.or(loaded.seed).unwrap_or(0),
        });
    }
    let preset = common.preset.unwrap_or(fallback);
    Ok(Resolved { rig: RigConfig::preset(preset), source: format!("preset:{preset}"), seed: common.seed.unwrap_or(0) })
}

/// Result of one invocation.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: RunManifest,
    /// Names of failed checks; empty on success.
    pub failures: Vec<String>,
    /// Human-readable lines for stdout.
    pub summary: Vec<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs one subcommand and writes its reports.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let report = commands::execute(cli)?;
    let manifest = RunManifest {
        subcommand: cli.command.name().to_string(),
        config: report.source,
        seed: report.seed,
        out_dir: cli.common.out.display().to_string(),
        passed: report.failures.is_empty(),
        files: Vec::new(),
    };
    let manifest = report.outputs.write(&cli.common.out, manifest)?;
    Ok(Outcome { manifest, failures: report.failures, summary: report.summary })
}
