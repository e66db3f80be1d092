use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gaitfuse_core::config::CamTarget;
use gaitfuse_core::features::FeatureSet;
use gaitfuse_core::model::{FusionMode, Variant};
use gaitfuse_core::stgcn::Preset;

#[derive(Debug, Parser)]
#[command(name = "gaitfuse", version, about = "Gait-severity classification from 2D pose sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert pose JSONL to hip-centered, torso-normalized COCO-17.
    Convert {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Cut sequences into quality-filtered fixed-length windows.
    Window {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Extract the 24 gait features of every window into a CSV.
    Features {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Split by patient, train a classifier and save a checkpoint.
    Train {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one split of a pose file.
    Eval {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitPart::Test)]
        split: SplitPart,
        #[command(flatten)]
        common: Common,
    },
    /// Grad-CAM and occlusion keypoint importance for test clips.
    Attribute {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of test clips, spread evenly over the split.
        #[arg(long, default_value_t = 20)]
        clips: usize,
        /// Class to explain.
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate labeled synthetic walkers with ground-truth sidecar fields.
    Synth {
        #[arg(long)]
        clips_per_class: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Confusion percentages, ROC points and a summary table from eval outputs.
    Report {
        /// Output directories of `eval`, one per configuration.
        #[arg(required = true)]
        evals: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Convert { common, .. }
            | Command::Window { common, .. }
            | Command::Features { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Attribute { common, .. }
            | Command::Synth { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    #[arg(long, value_enum)]
    pub features: Option<FeatureArg>,
    /// Model streams.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Frame rate for inputs that do not record one.
    #[arg(long)]
    pub fps: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl Common {
    /// True when anything selects the model architecture explicitly.
    pub fn sets_model(&self) -> bool {
        self.config.is_some()
            || self.preset.is_some()
            || self.fusion.is_some()
            || self.features.is_some()
            || self.variant.is_some()
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Paper,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FusionArg {
    Concat,
    Xattn,
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Concat => FusionMode::Concat,
            FusionArg::Xattn => FusionMode::CrossAttention,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FeatureArg {
    All24,
    Selected14,
}

impl From<FeatureArg> for FeatureSet {
    fn from(f: FeatureArg) -> Self {
        match f {
            FeatureArg::All24 => FeatureSet::All24,
            FeatureArg::Selected14 => FeatureSet::Selected14,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Fused,
    Skeleton,
    Clinical,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Fused => Variant::Fused,
            VariantArg::Skeleton => Variant::Skeleton,
            VariantArg::Clinical => Variant::Clinical,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    Predicted,
    True,
}

impl From<TargetArg> for CamTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Predicted => CamTarget::Predicted,
            TargetArg::True => CamTarget::True,
        }
    }
}
