use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "ldfc", version, about = "Data-free compression of convolutional networks")]
pub struct Cli {
    /// Where to write the run manifest (default: next to the output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Summarize a model: blocks, shapes, parameter counts, BatchNorm and buffer state.
    Inspect(InspectArgs),
    /// Fuse BatchNorm and equalize, keeping the recording buffers.
    Precondition(PreconditionArgs),
    /// Quantize weights and activations without data.
    Quantize(QuantizeArgs),
    /// Prune with layer-wise soft-threshold training or a magnitude baseline.
    Prune(PruneArgs),
    /// Measure top-1 accuracy on a labelled dataset.
    Eval(EvalArgs),
    /// Run a grid of pruning configurations and write frontier.csv.
    Sweep(SweepArgs),
    /// Render a JSON report as a table, optionally as CSV.
    Report(ReportArgs),
    /// Re-run the invocation recorded in a manifest and compare the outputs.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Inspect(_) => "inspect",
            Command::Precondition(_) => "precondition",
            Command::Quantize(_) => "quantize",
            Command::Prune(_) => "prune",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Report(_) => "report",
            Command::Replay(_) => "replay",
        }
    }

    pub fn seed_mut(&mut self) -> Option<&mut Option<u64>> {
        match self {
            Command::Quantize(a) => Some(&mut a.seed),
            Command::Prune(a) => Some(&mut a.seed),
            Command::Sweep(a) => Some(&mut a.seed),
            _ => None,
        }
    }

    pub fn primary_output(&self) -> Option<PathBuf> {
        match self {
            Command::Precondition(a) => Some(a.output.clone()),
            Command::Quantize(a) => Some(a.output.clone()),
            Command::Prune(a) => Some(a.output.clone()),
            Command::Eval(a) => a.output.clone(),
            Command::Sweep(a) => Some(a.out_dir.join("frontier.csv")),
            Command::Report(a) => a.csv.clone(),
            Command::Inspect(_) | Command::Replay(_) => None,
        }
    }

    /// The same invocation with every written file moved into `dir`.
    pub fn redirect_outputs(&self, dir: &Path) -> Command {
        let move_to = |p: &Path| dir.join(p.file_name().unwrap_or(p.as_os_str()));
        let mut c = self.clone();
        match &mut c {
            Command::Precondition(a) => {
                a.output = move_to(&a.output);
                a.report = a.report.as_deref().map(move_to);
            }
            Command::Quantize(a) => {
                a.output = move_to(&a.output);
                a.report = a.report.as_deref().map(move_to);
            }
            Command::Prune(a) => {
                a.output = move_to(&a.output);
                a.report = a.report.as_deref().map(move_to);
            }
            Command::Eval(a) => a.output = a.output.as_deref().map(move_to),
            Command::Sweep(a) => a.out_dir = dir.to_path_buf(),
            Command::Report(a) => a.csv = a.csv.as_deref().map(move_to),
            Command::Inspect(_) | Command::Replay(_) => {}
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct InspectArgs {
    pub model: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PreconditionArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Only fuse BatchNorm.
    #[arg(long)]
    pub no_afcle: bool,
    /// Apply bias absorption after equalization.
    #[arg(long)]
    pub absorb: bool,
    /// Fold the recording buffers into the weights.
    #[arg(long)]
    pub fold: bool,
    #[arg(long, default_value_t = 0.001)]
    pub eps_stop: f64,
    #[arg(long, default_value_t = 100)]
    pub max_sweeps: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct QuantizeArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub bits: u8,
    /// Global seed (falls back to LDFC_SEED, then 0).
    #[arg(long, env = "LDFC_SEED")]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    pub grid_steps: usize,
    #[arg(long, default_value_t = 2000)]
    pub calib_batch: usize,
    #[arg(long)]
    pub no_bias_absorption: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMethod {
    Str,
    Global,
    Uniform,
    Erk,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct StrArgs {
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    pub s0: f64,
    #[arg(long, default_value_t = 1.551757813e-5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Length of the cosine learning-rate schedule.
    #[arg(long, default_value_t = 100_000)]
    pub horizon: usize,
    /// Train s on the weight decay only.
    #[arg(long)]
    pub no_s_loss_grad: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PruneArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = PruneMethod::Str)]
    pub method: PruneMethod,
    #[command(flatten)]
    #[serde(flatten)]
    pub str: StrArgs,
    /// Required by the magnitude baselines.
    #[arg(long)]
    pub target_sparsity: Option<f64>,
    #[arg(long, env = "LDFC_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Float,
    Quant,
    Str,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalMode::Float)]
    pub mode: EvalMode,
    #[arg(long)]
    pub json: bool,
    /// Also write the result as JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated s0 values (default -2, -2.33, ..., -6.95).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub s0: Vec<f64>,
    /// Comma-separated lambda values.
    #[arg(long, value_delimiter = ',', default_value = "1.551757813e-5")]
    pub lambda: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 100_000)]
    pub horizon: usize,
    #[arg(long)]
    pub no_s_loss_grad: bool,
    #[arg(long, env = "LDFC_SEED")]
    pub seed: Option<u64>,
    /// Runs per configuration, with seeds seed, seed + 1, ...
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    /// Labelled dataset for an accuracy column.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Also write every pruned model into the output directory.
    #[arg(long)]
    pub save_models: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// A report written by precondition, quantize or prune.
    pub report: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write the replayed outputs here instead of over the originals.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// The s0 grid from -2 downwards in steps of 0.33, sixteen values.
pub fn default_s0_grid() -> Vec<f64> {
    (0..16)
        .map(|k| ((-2.0 - 0.33 * k as f64) * 100.0).round() / 100.0)
        .collect()
}
