//! Command-line arguments. Every command's arguments are also its manifest
//! record: optional values are resolved against the profile before any
//! work starts, and the resolved form is what gets serialized.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fnri::eval::MseMode;
use fnri::model::TrainMode;
use fnri::scheme::Variant;
use fnri::sim::System;

#[derive(Parser, Debug)]
#[command(name = "fnri", version, about = "Factorised neural relational inference on simulated particle systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Simulate train/valid/test datasets.
    Gen(GenArgs),
    /// Train a model and keep the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a baseline.
    Eval(EvalArgs),
    /// Write predicted and true trajectories as CSV.
    ExportPlot(ExportArgs),
    /// Repeat a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// CPU-sized runs: 2000/500/500 examples, hidden 64, 60 epochs.
    #[default]
    Desk,
    /// Full-scale settings: 50000/10000/10000 examples, hidden 256, 500 epochs.
    Paper,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Copies the last observed state forward.
    Static,
    /// Uniformly random edge labels.
    Random,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value_t)]
    pub profile: Profile,
    /// Interaction system: i+c or i+c+f.
    #[arg(long, default_value = "i+c", value_parser = System::from_str)]
    pub system: System,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub valid: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    #[serde(default)]
    pub force: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t)]
    pub profile: Profile,
    /// nri, fnri or sfnri.
    #[arg(long, value_parser = Variant::from_str)]
    pub model: Variant,
    /// learned, supervised or truegraph.
    #[arg(long, default_value = "learned", value_parser = TrainMode::from_str)]
    pub mode: TrainMode,
    /// Edge-type counts, e.g. "4", "2+2"; defaults to the system's standard
    /// choice for the model.
    #[arg(long)]
    pub edge_types: Option<String>,
    /// Directory holding train.fnri and valid.fnri.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Metrics log; defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub lr_decay_every: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Concrete-distribution temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Teacher-forcing period M.
    #[arg(long)]
    pub teacher_forcing: Option<usize>,
    /// Output variance of the Gaussian likelihood.
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Encoder dropout (supervised mode).
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Weight penalty (sfnri).
    #[arg(long)]
    pub l2: Option<f64>,
    /// Straight-through one-hot samples while training.
    #[arg(long)]
    #[serde(default)]
    pub hard_sample: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(default)]
    pub force: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Checkpoint to evaluate; omit with --baseline.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub data: PathBuf,
    /// Split file inside the data directory.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_delimiter = ',', default_value = "1,10,20")]
    pub steps: Vec<usize>,
    /// MSE at exactly step k (at) or averaged over steps 1..=k (cum).
    #[arg(long, default_value = "at", value_parser = MseMode::from_str)]
    pub mse_mode: MseMode,
    /// Model whose label layout the random baseline draws (default fnri).
    #[arg(long, value_parser = Variant::from_str)]
    pub model: Option<Variant>,
    #[arg(long)]
    pub edge_types: Option<String>,
    /// Independent random draws pooled by the random baseline.
    #[arg(long, default_value_t = 20)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV of per-example combined accuracy.
    #[arg(long)]
    pub per_example: Option<PathBuf>,
    #[arg(long)]
    #[serde(default)]
    pub force: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Number of examples to export.
    #[arg(long, default_value_t = 1)]
    pub examples: usize,
    /// Free-running prediction steps; defaults to the whole second half.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(default)]
    pub force: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded paths.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(default)]
    pub force: bool,
}

impl TrainArgs {
    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| sibling(&self.ckpt, "log.jsonl"))
    }
}

/// `dir/name.ckpt` → `dir/name.ckpt.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.fnri"))
}
