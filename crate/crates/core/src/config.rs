//! One structured configuration for a whole run. Unknown keys are rejected
//! at every level so a typo never silently falls back to a default.

use serde::{Deserialize, Serialize};

use crate::attribution::TimeAggregation;
use crate::error::{contract, Result};
use crate::features::FeatureConfig;
use crate::model::ModelConfig;
use crate::pose::{SplitConfig, SyntheticSpec, DEFAULT_FPS};
use crate::train::TrainConfig;

/// Which class Grad-CAM explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamTarget {
    #[default]
    Predicted,
    True,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub target: CamTarget,
    pub time_aggregation: TimeAggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Frame rate assumed for inputs that do not record one.
    pub fps: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub features: FeatureConfig,
    pub synth: SyntheticSpec,
    pub attribution: AttributionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fps: DEFAULT_FPS,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            features: FeatureConfig::default(),
            synth: SyntheticSpec::default(),
            attribution: AttributionConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.fps > 0.0 && self.fps.is_finite(), "fps must be positive, got {}", self.fps);
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    /// The run seed (drives initialization, splitting, shuffling,
    /// augmentation and dropout).
    pub fn seed(&self) -> u64 {
        self.train.seed
    }
}
