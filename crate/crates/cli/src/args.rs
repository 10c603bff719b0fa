use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "congeal", version, about = "Align object image collections to a canonical 3D shape")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON configuration file (alignment settings, or the scene job for `synth`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set refine.iterations=200`.
    /// Values are parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground-truth poses and keypoints.
    Synth,
    /// Initialize, refine and congeal every image of a manifest.
    Align(AlignArgs),
    /// Pose initialization only, or export of candidate renders for an
    /// external featurizer.
    InitPose(InitArgs),
    /// Refine poses from a previous run.
    RefinePose(StagedArgs),
    /// Fit canonical warps at given poses.
    Congeal(StagedArgs),
    /// Map canonical points into every image of an alignment run.
    Uncongeal(UncongealArgs),
    /// Transfer keypoints from one image to another.
    Transfer(TransferArgs),
    /// Paste a region of one image onto another through the canonical frame.
    Edit(EditArgs),
    /// Procrustes-aligned pose errors against ground truth.
    EvalPose(EvalPoseArgs),
    /// Percentage of correct keypoints.
    EvalPck(EvalPckArgs),
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Voxel field description (`field.json`).
    #[arg(long)]
    pub field: PathBuf,
    /// Image manifest.
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct CandidateArgs {
    /// Directory of externally computed candidate descriptors
    /// (`<candidate id>.tnsr` plus a completion marker).
    #[arg(long)]
    pub candidate_features: Option<PathBuf>,
    /// Directory holding the exported candidate renders
    /// (defaults to `<out>/candidates`).
    #[arg(long)]
    pub candidate_renders: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub candidates: CandidateArgs,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub candidates: CandidateArgs,
    /// Write candidate renders and their index to `<out>/candidates`, then stop.
    #[arg(long)]
    pub export_candidates: bool,
}

#[derive(Debug, Args)]
pub struct StagedArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Starting poses (`poses.json` of an earlier run).
    #[arg(long)]
    pub poses: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Output directory of an alignment run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct UncongealArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// JSON list of canonical (NOCS) points `[[x, y, z], ...]`.
    #[arg(long)]
    pub points: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Point set in the source image (its `image_id` names the source).
    #[arg(long)]
    pub keypoints: PathBuf,
    #[arg(long)]
    pub target: String,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub target: String,
    /// Mask (PGM) of the source region to paste.
    #[arg(long)]
    pub region: PathBuf,
    /// Edited source image (PPM); defaults to the manifest image.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalPoseArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalPckArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Object bounding box as `HxW` pixels.
    #[arg(long, conflicts_with = "mask")]
    pub bbox: Option<String>,
    /// Target mask (PGM) whose tight bounding box sets the PCK radius.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}
