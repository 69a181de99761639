//! Experiment configuration, stored as TOML with a `schema_version` field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{FeatureConfig, TrainConfig};
use crate::error::Error;
use crate::scene::SceneGenConfig;
use crate::sensors::SensorRig;
use crate::staleness::StalenessConfig;

pub const CONFIG_SCHEMA: u32 = 1;

/// Every tunable of a run. All randomness derives from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scene: SceneGenConfig,
    #[serde(default)]
    pub sensors: SensorRig,
    #[serde(default)]
    pub staleness: StalenessConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub experiment: ExperimentPlan,
    #[serde(default)]
    pub generate: GeneratePlan,
    #[serde(default)]
    pub augment: AugmentPlan,
    #[serde(default)]
    pub misalign: MisalignPlan,
    #[serde(default)]
    pub profile: ProfilePlan,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA,
            seed: 7,
            scene: SceneGenConfig::default(),
            sensors: SensorRig::default(),
            staleness: StalenessConfig::default(),
            features: FeatureConfig::default(),
            training: TrainConfig::default(),
            experiment: ExperimentPlan::default(),
            generate: GeneratePlan::default(),
            augment: AugmentPlan::default(),
            misalign: MisalignPlan::default(),
            profile: ProfilePlan::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Robustness table and P_S sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Fixed camera staleness of the stale evaluation set, seconds.
    pub eval_camera_staleness: f64,
    pub ps_sweep: Vec<f64>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self { train_scenes: 48, eval_scenes: 16, eval_camera_staleness: 0.1, ps_sweep: vec![0.0, 0.0025, 0.01, 0.05, 0.2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratePlan {
    /// Fully simulated scenes written to disk.
    pub scenes: usize,
    /// Length of the timing-only log, seconds. 0 disables it.
    pub log_duration: f64,
    /// Probability that a logged camera frame is delivered one period late.
    pub log_camera_stale_probability: f64,
}

impl Default for GeneratePlan {
    fn default() -> Self {
        Self { scenes: 1, log_duration: 1800.0, log_camera_stale_probability: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPlan {
    pub scenes: usize,
    /// Keep every n-th usable frame.
    pub frame_stride: usize,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        Self { scenes: 1, frame_stride: 6 }
    }
}

/// Ego passing a static object abeam, camera looking at it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MisalignPlan {
    pub ego_speed: f64,
    pub object_depth: f64,
    pub focal_length: f64,
    pub staleness: Vec<f64>,
}

impl Default for MisalignPlan {
    fn default() -> Self {
        Self { ego_speed: 13.41, object_depth: 20.0, focal_length: 500.0, staleness: vec![0.0, 0.025, 0.05, 0.1, 0.15, 0.2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfilePlan {
    /// Histogram bin width, seconds.
    pub bin_width: f64,
}

impl Default for ProfilePlan {
    fn default() -> Self {
        Self { bin_width: 0.005 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Staleness settings with the run seed applied.
    pub fn staleness_config(&self) -> StalenessConfig {
        StalenessConfig { seed: self.seed, ..self.staleness.clone() }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::Config(format!("unsupported schema_version {} (expected {CONFIG_SCHEMA})", self.schema_version)));
        }
        self.scene.validate()?;
        self.sensors.validate()?;
        self.staleness.validate()?;
        self.features.validate().map_err(Error::Config)?;
        self.training.validate().map_err(Error::Config)?;
        let e = &self.experiment;
        if !(e.eval_camera_staleness >= 0.0) || !e.eval_camera_staleness.is_finite() {
            return Err(Error::Config("eval_camera_staleness must be finite and nonnegative".into()));
        }
        if e.ps_sweep.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("ps_sweep values must lie in [0, 1]".into()));
        }
        let g = &self.generate;
        if !(g.log_duration >= 0.0) || !g.log_duration.is_finite() {
            return Err(Error::Config("log_duration must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&g.log_camera_stale_probability) {
            return Err(Error::Config("log_camera_stale_probability must lie in [0, 1]".into()));
        }
        if self.augment.frame_stride == 0 {
            return Err(Error::Config("augment.frame_stride must be positive".into()));
        }
        let m = &self.misalign;
        if !(m.object_depth > 0.0) || !(m.focal_length > 0.0) {
            return Err(Error::Config("misalign depth and focal length must be positive".into()));
        }
        if !(self.profile.bin_width > 0.0) || !self.profile.bin_width.is_finite() {
            return Err(Error::Config("profile.bin_width must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert!(text.contains("schema_version = 1"));
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("schema_version = 1\nseed = 3\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.staleness.t_j_max, 0.1);
        assert_eq!(cfg.staleness.policy_threshold, 0.150);
        assert_eq!(cfg.features.grid_cols, 40);
        assert_eq!(cfg.staleness_config().seed, 3);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for text in [
            "schema_version = 2",
            "schema_version = 1\nbogus = 1",
            "schema_version = 1\n[staleness]\np_s = 2.0",
            "schema_version = 1\n[experiment]\nps_sweep = [0.0, -0.1]",
            "schema_version = 1\n[scene]\nduration = -1.0",
        ] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }
}
