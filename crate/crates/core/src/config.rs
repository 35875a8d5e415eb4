//! Trial configuration: a single JSON document that, together with a seed, fixes a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchor_init::HeightPrior;
use crate::controller::ControllerConfig;
use crate::nav_ekf::PriorStds;
use crate::repeat_init::{FlatFloorStds, RepeatInitPrior};
use crate::world_sim::{Anchor, Environment, SensorSpec, TagGeometry, TeachScript, TeachScriptSpec, WorldError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    World(#[from] WorldError),
}

/// Where the anchors are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentSpec {
    /// Evenly spaced along the script footprint, offset to the right of travel.
    AlongScript {
        count: usize,
        comm_range: f64,
        lateral_offset: f64,
        height: f64,
        #[serde(default)]
        height_pattern: Vec<f64>,
    },
    Explicit { anchors: Vec<Anchor>, comm_range: f64 },
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        EnvironmentSpec::AlongScript {
            count: 6,
            comm_range: 25.0,
            lateral_offset: 4.0,
            height: 2.0,
            height_pattern: vec![0.0, 0.3, -0.2, 0.1, -0.3],
        }
    }
}

impl EnvironmentSpec {
    pub fn build(&self, script: &TeachScript) -> Result<Environment, WorldError> {
        match self {
            EnvironmentSpec::AlongScript { count, comm_range, lateral_offset, height, height_pattern } => {
                Environment::generate_along(script, *count, *comm_range, *lateral_offset, *height, height_pattern)
            }
            EnvironmentSpec::Explicit { anchors, comm_range } => Environment::new(anchors.clone(), *comm_range),
        }
    }
}

/// Random offset of the repeat start from the teach start: position uniform in a disc,
/// heading uniform in `±max_heading`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StartPerturbation {
    pub radius: f64,
    pub max_heading: f64,
}

impl Default for StartPerturbation {
    fn default() -> Self {
        Self { radius: 0.5, max_heading: 15f64.to_radians() }
    }
}

/// Spread of the true initial biases and clocks, and of the anchor clocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthInit {
    /// Draw the vehicle's initial biases and clocks from the estimator priors.
    pub draw_from_prior: bool,
    /// Anchor clock offsets are uniform in `±anchor_offset` (s).
    pub anchor_offset: f64,
    pub anchor_skew_std: f64,
}

impl Default for TruthInit {
    fn default() -> Self {
        Self { draw_from_prior: true, anchor_offset: 1e-3, anchor_skew_std: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub script: TeachScriptSpec,
    pub environment: EnvironmentSpec,
    pub tags: TagGeometry,
    /// Noise of the simulated world.
    pub sensors: SensorSpec,
    /// Noise assumed by the estimators; defaults to `sensors`.
    pub estimator_sensors: Option<SensorSpec>,
    pub truth_init: TruthInit,
    pub teach_prior: PriorStds,
    /// λ in IMU steps.
    pub window_steps: usize,
    pub height_prior: HeightPrior,
    /// L in IMU steps.
    pub static_steps: usize,
    pub repeat_prior: RepeatInitPrior,
    pub flat_floor: FlatFloorStds,
    pub controller: ControllerConfig,
    pub max_skip: usize,
    /// Position uncertainty the repeat filter attributes to mapped anchors (m).
    pub map_std: f64,
    pub start_perturbation: StartPerturbation,
    /// Start/end horizontal separation allowed for the teach script (m).
    pub closure_threshold: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            script: TeachScriptSpec::default(),
            environment: EnvironmentSpec::default(),
            tags: TagGeometry::default(),
            sensors: SensorSpec::default(),
            estimator_sensors: None,
            truth_init: TruthInit::default(),
            teach_prior: PriorStds { gyro_bias: 2e-4, ..PriorStds::default() },
            window_steps: 200,
            height_prior: HeightPrior::default(),
            static_steps: 500,
            repeat_prior: RepeatInitPrior::default(),
            flat_floor: FlatFloorStds::default(),
            controller: ControllerConfig::default(),
            max_skip: 2,
            map_std: 0.3,
            start_perturbation: StartPerturbation::default(),
            closure_threshold: 1.0,
            trials: 50,
            seed: 1,
        }
    }
}

impl TrialConfig {
    /// Every noise source off, anchors at the prior height, no start perturbation, and
    /// exact initial biases and clocks. Estimators keep the default noise model.
    pub fn zero_noise() -> Self {
        let base = Self::default();
        let h = base.height_prior.h;
        Self {
            sensors: base.sensors.noiseless(),
            estimator_sensors: Some(base.sensors.clone()),
            environment: EnvironmentSpec::AlongScript {
                count: 6,
                comm_range: 25.0,
                lateral_offset: 4.0,
                height: h,
                height_pattern: Vec::new(),
            },
            truth_init: TruthInit { draw_from_prior: false, ..TruthInit::default() },
            start_perturbation: StartPerturbation { radius: 0.0, max_heading: 0.0 },
            ..base
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn estimator_spec(&self) -> &SensorSpec {
        self.estimator_sensors.as_ref().unwrap_or(&self.sensors)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sensors.validate()?;
        self.estimator_spec().validate()?;
        self.tags.validate()?;
        let est = self.estimator_spec();
        if est.height_std <= 0.0 || est.timestamp_std <= 0.0 {
            return Err(ConfigError::Invalid("estimator height and timestamp noise must be positive".into()));
        }
        if self.window_steps == 0 || self.static_steps == 0 {
            return Err(ConfigError::Invalid("window_steps and static_steps must be positive".into()));
        }
        if self.controller.horizon == 0 {
            return Err(ConfigError::Invalid("controller horizon must be positive".into()));
        }
        let p = &self.start_perturbation;
        if !(p.radius >= 0.0 && p.max_heading >= 0.0) {
            return Err(ConfigError::Invalid("start perturbation must be nonnegative".into()));
        }
        if !(self.map_std >= 0.0) {
            return Err(ConfigError::Invalid("map_std must be nonnegative".into()));
        }
        if !(self.height_prior.variance > 0.0) {
            return Err(ConfigError::Invalid("height prior variance must be positive".into()));
        }
        Ok(())
    }
}
