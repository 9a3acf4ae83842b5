use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rfsim::mapping::MappingScheme;
use serde::{Deserialize, Serialize};

use crate::lists::NumList;

#[derive(Debug, Parser)]
#[command(
    name = "rfsim",
    version,
    about = "ReRAM crossbar stuck-at fault simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a reference network and save it as a model file
    Train(TrainArgs),
    /// Magnitude-prune a model, optionally fine-tuning with the mask held
    Prune(PruneArgs),
    /// Hierarchical progressive pruning guided by fault-injected accuracy
    Search(SearchArgs),
    /// Monte-Carlo fault injection on one model
    Inject(InjectArgs),
    /// Accuracy sweep over schemes, fault rates and pruning ratios
    Sweep(SweepArgs),
    /// Check the analytic mismatch expectation by simulation
    VerifyExpectation(VerifyArgs),
    /// Summarize a model file or a dataset
    Inspect(InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Prune(_) => "prune",
            Command::Search(_) => "search",
            Command::Inject(_) => "inject",
            Command::Sweep(_) => "sweep",
            Command::VerifyExpectation(_) => "verify-expectation",
            Command::Inspect(_) => "inspect",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Common {
    /// Base seed for every random choice (printed at start)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads [default: all cores]; results never depend on it
    #[arg(long)]
    pub jobs: Option<usize>,
    /// JSON config with the schema of a provenance `config` block; flags given on the command line override it
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Directory holding the dataset files
    #[arg(long, default_value = "data/mnist")]
    pub data_dir: PathBuf,
    /// Dataset file format
    #[arg(long, value_enum, default_value_t = DataKind::Mnist)]
    pub dataset: DataKind,
    /// Evaluate on the first N test samples only [default: whole test set]
    #[arg(long)]
    pub eval_subset: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FaultArgs {
    /// Stuck-on : stuck-off ratio used to split total rates (0 = stuck-off only)
    #[arg(long, default_value_t = rfsim::faults::DEFAULT_ON_OFF_RATIO)]
    pub on_off_ratio: f64,
    /// Explicit per-cell stuck-off probability (overrides total rates)
    #[arg(long)]
    pub p_off: Option<f64>,
    /// Explicit per-cell stuck-on probability (overrides total rates)
    #[arg(long)]
    pub p_on: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct HardwareArgs {
    /// Crossbar tile rows
    #[arg(long, default_value_t = rfsim::mapping::DEFAULT_TILE)]
    pub tile_rows: usize,
    /// Crossbar tile columns
    #[arg(long, default_value_t = rfsim::mapping::DEFAULT_TILE)]
    pub tile_cols: usize,
    /// Also fault unused padding cells
    #[arg(long)]
    pub all_cells: bool,
    /// Reuse one fault mask for every trial and evaluation (single device)
    #[arg(long)]
    pub fixed_device: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FinetuneArgs {
    /// Epochs of masked fine-tuning after each pruning step (0 = off)
    #[arg(long, default_value_t = 0)]
    pub finetune_epochs: usize,
    /// Fine-tuning learning rate
    #[arg(long, default_value_t = 0.1)]
    pub finetune_lr: f64,
    /// Fine-tuning momentum
    #[arg(long, default_value_t = 0.9)]
    pub finetune_momentum: f64,
    /// Fine-tuning minibatch size
    #[arg(long, default_value_t = 64)]
    pub finetune_batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Network architecture
    #[arg(long, value_enum, default_value_t = Arch::Mlp)]
    pub arch: Arch,
    /// Hidden layer widths of the MLP
    #[arg(long, value_delimiter = ',', default_value = "128")]
    pub hidden: Vec<usize>,
    /// Training epochs
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    /// Learning rate
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Momentum
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Minibatch size
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Train on the first N training samples only
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Output model file
    #[arg(long, required_unless_present = "config")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PruneArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub finetune: FinetuneArgs,
    /// Input model file
    #[arg(long, required_unless_present = "config")]
    pub model: Option<PathBuf>,
    /// Fraction of weights to zero
    #[arg(long, required_unless_present = "config")]
    pub ratio: Option<f64>,
    /// Layers pruned as one pooled block [default: every weight layer on its own]
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Output model file
    #[arg(long, required_unless_present = "config")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SearchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub faults: FaultArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub hardware: HardwareArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub finetune: FinetuneArgs,
    /// Input model file
    #[arg(long, required_unless_present = "config")]
    pub model: Option<PathBuf>,
    /// Accepted accuracy drop per step, in percentage points
    #[arg(long, default_value_t = 0.5)]
    pub th: f64,
    /// Candidate pruning ratios, ascending (list or start:stop:step)
    #[arg(long, default_value = "0.1:0.9:0.1")]
    pub ratios: NumList,
    /// Fault-injection trials per evaluation
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Crossbar mapping scheme
    #[arg(long, default_value = "differential")]
    pub scheme: MappingScheme,
    /// Total per-cell fault rate
    #[arg(long, default_value_t = 0.01)]
    pub fault_rate: f64,
    /// Block definition as `;`-separated groups of comma-separated layer indices [default: group by width]
    #[arg(long)]
    pub blocks: Option<String>,
    /// Output model file [default: <model>.best.rfsm]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Search trace (JSON lines) [default: <out>.trace.jsonl]
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InjectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub faults: FaultArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub hardware: HardwareArgs,
    /// Input model file
    #[arg(long, required_unless_present = "config")]
    pub model: Option<PathBuf>,
    /// Crossbar mapping scheme
    #[arg(long, default_value = "two-column")]
    pub scheme: MappingScheme,
    /// Total per-cell fault rate
    #[arg(long, default_value_t = 0.01)]
    pub fault_rate: f64,
    /// Monte-Carlo trials
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Write the statistics as JSON here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub faults: FaultArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub hardware: HardwareArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub finetune: FinetuneArgs,
    /// Input model file
    #[arg(long, required_unless_present = "config")]
    pub model: Option<PathBuf>,
    /// Mapping schemes (comma-separated)
    #[arg(long, value_delimiter = ',', default_value = "two-column")]
    pub scheme: Vec<MappingScheme>,
    /// Total per-cell fault rates (list or start:stop:step)
    #[arg(long, default_value = "0.01")]
    pub rates: NumList,
    /// Layer-wise pruning ratios (list or start:stop:step)
    #[arg(long, default_value = "0")]
    pub ratios: NumList,
    /// Monte-Carlo trials per grid point
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// CSV report; the JSON companion and resume file sit next to it
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub faults: FaultArgs,
    /// Single-cell weights simulated per trial
    #[arg(long, default_value_t = 1_000_000)]
    pub cells: usize,
    /// Total per-cell fault rates (list or start:stop:step)
    #[arg(long, default_value = "0.062")]
    pub rate: NumList,
    /// Pruning ratios R_p (list or start:stop:step)
    #[arg(long, default_value = "0:1:0.25")]
    pub ratio: NumList,
    /// Independent repetitions per grid point
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    /// Write the table as CSV here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InspectArgs {
    /// Model file to describe
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset directory to describe
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Dataset file format
    #[arg(long, value_enum, default_value_t = DataKind::Mnist)]
    pub dataset: DataKind,
}
