use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use depthflow_core::flow::ObjectiveKind;
use depthflow_core::SchemeKind;

use crate::config::{List, Ratio};
use crate::train::{JointChoice, TaskName};

#[derive(Debug, Parser)]
#[command(
    name = "depthflow",
    version,
    about = "Depth label quantization and flow-matching experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Worst-case BF16 depth error per quantization scheme.
    QuantTable(QuantArgs),
    /// Generate and save a synthetic scene dataset.
    GenData(GenArgs),
    /// Train a flow model or a joint depth/normal model.
    Train(TrainArgs),
    /// Score a checkpoint (or a prediction dataset) against scenes.
    Eval(EvalArgs),
    /// Velocity-field arrows and trajectories, noise start vs zero start.
    FieldPlot(FieldArgs),
    /// Run the ablation matrix and rank the configurations.
    Ablate(AblateArgs),
}

/// Flags every command accepts.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// key = value file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory. Defaults to $FE2E_LAB_OUT/<command>, else runs/<command>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct QuantArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated subset of uniform, inverse, logarithmic.
    #[arg(long)]
    pub schemes: Option<List<String>>,
    /// Label step, decimal or fraction (default 1/256).
    #[arg(long)]
    pub delta_v: Option<Ratio>,
    /// Depths for the headline table, meters.
    #[arg(long)]
    pub depths: Option<List<f64>>,
    /// Points in the dense sweep.
    #[arg(long)]
    pub sweep_points: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub count: Option<usize>,
    /// Indoor-like,outdoor-like probabilities.
    #[arg(long)]
    pub mix: Option<List<f64>>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

/// Data and model options shared by `train` and `ablate`.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// direct, cv or cvfs.
    #[arg(long)]
    pub objective: Option<ObjectiveKind>,
    /// uniform, inverse or log.
    #[arg(long)]
    pub quant: Option<SchemeKind>,
    /// on, off, or single (token model, depth half only).
    #[arg(long)]
    pub joint: Option<JointChoice>,
    /// Euler steps for direct inference.
    #[arg(long)]
    pub euler_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Dispersion weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Hidden widths of the flow MLP, e.g. 128,128.
    #[arg(long)]
    pub hidden: Option<List<usize>>,
    /// Token width of the joint model.
    #[arg(long)]
    pub dim: Option<usize>,
    /// scenes or toy.
    #[arg(long)]
    pub task: Option<TaskName>,
    /// Training dataset directory; generated from the seed when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Toy task widths.
    #[arg(long)]
    pub cond_dim: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory whose depth and normals are scored as predictions.
    #[arg(long, conflicts_with = "checkpoint")]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Number of inference seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// depth or disparity.
    #[arg(long)]
    pub align: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct FieldArgs {
    #[command(flatten)]
    pub common: Common,
    /// 2-D flow checkpoint to plot alongside the analytic fields.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Lattice points per side.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub times: Option<List<f64>>,
    /// Noise starts traced under the direct field.
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long)]
    pub euler_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated training seeds.
    #[arg(long)]
    pub seeds: Option<List<u64>>,
}
