//! Run configuration, loadable from TOML. Unknown keys are rejected.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ddp::{CostWeights, SolverOptions};
use crate::dynamics::InertiaParams;
use crate::kinematics::{RobotModel, TrackerParams};
use crate::perception::{JumpDetectorParams, TipDetectorConfig};
use crate::scene::SceneConfig;
use crate::servo::BroydenParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config value: {0}")]
    Invalid(String),
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub n_traj: usize,
    pub weights: CostWeights,
    pub solver: SolverOptions,
    pub inertia: InertiaParams,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            n_traj: 64,
            weights: CostWeights::default(),
            solver: SolverOptions::default(),
            inertia: InertiaParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoConfig {
    /// Alignment tolerance between tip and goal pixels.
    pub alpha_px: f64,
    /// Descent per lowering waypoint.
    pub eta: f64,
    pub max_planar_step: f64,
    /// Frames averaged after each motion before deciding the next one.
    pub settle_frames: usize,
    pub broyden: BroydenParams,
    /// Initial image Jacobian, row-major, pixels per metre.
    pub j0: [[f64; 2]; 2],
    /// Replan every `mpc_period` frames instead of waiting for each motion to finish.
    pub mpc: bool,
    pub mpc_period: usize,
}

impl Default for ServoConfig {
    fn default() -> Self {
        ServoConfig {
            alpha_px: 1.0,
            eta: 40e-6,
            max_planar_step: 200e-6,
            settle_frames: 5,
            broyden: BroydenParams::default(),
            j0: [[1.0, 0.0], [0.0, 1.0]],
            mpc: false,
            mpc_period: 3,
        }
    }
}

impl ServoConfig {
    pub fn j0_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.j0[0][0], self.j0[0][1], self.j0[1][0], self.j0[1][1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    /// Contact when the relative correlation drop reaches this value.
    pub gamma: f64,
    pub template_size: u32,
    pub search_radius: u32,
    pub tip: TipDetectorConfig,
    pub jump: JumpDetectorParams,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig {
            gamma: 0.18,
            template_size: 64,
            search_radius: 10,
            tip: TipDetectorConfig::default(),
            jump: JumpDetectorParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InsertionConfig {
    pub speed: f64,
    /// Abort if no puncture is seen within this axial advance.
    pub max_advance: f64,
}

impl Default for InsertionConfig {
    fn default() -> Self {
        InsertionConfig { speed: 100e-6, max_advance: 200e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyConfig {
    pub rcm_limit: f64,
    pub min_singular_value: f64,
    pub singular_timeout: f64,
    pub tip_lost_timeout: f64,
    pub max_duration: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        SafetyConfig {
            rcm_limit: 100e-6,
            min_singular_value: 1e-3,
            singular_timeout: 2.0,
            tip_lost_timeout: 1.0,
            max_duration: 240.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub frame_rate: f64,
    /// Distance of the remote centre of motion up the shaft from the start tip.
    pub rcm_distance: f64,
    pub scene: SceneConfig,
    pub robot: RobotModel,
    pub planner: PlannerConfig,
    pub tracker: TrackerParams,
    pub servo: ServoConfig,
    pub perception: PerceptionConfig,
    pub insertion: InsertionConfig,
    pub safety: SafetyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            frame_rate: 30.0,
            rcm_distance: 0.02,
            scene: SceneConfig::default(),
            robot: RobotModel::default(),
            planner: PlannerConfig::default(),
            tracker: TrackerParams::default(),
            servo: ServoConfig::default(),
            perception: PerceptionConfig::default(),
            insertion: InsertionConfig::default(),
            safety: SafetyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate
    }

    /// Planning horizon in seconds.
    pub fn horizon(&self) -> f64 {
        self.planner.n_traj as f64 * self.dt()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad(format!("frame_rate must be positive, got {}", self.frame_rate));
        }
        if !(self.rcm_distance > 0.0) {
            return bad("rcm_distance must be positive".into());
        }
        self.scene.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.robot.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.planner.weights.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.planner.inertia.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.planner.n_traj == 0 {
            return bad("n_traj must be at least 1".into());
        }
        let s = &self.servo;
        if !(s.alpha_px > 0.0 && s.eta > 0.0 && s.max_planar_step > 0.0) {
            return bad("alpha_px, eta and max_planar_step must be positive".into());
        }
        if !(s.broyden.beta > 0.0 && s.broyden.beta <= 1.0) {
            return bad(format!("beta must lie in (0, 1], got {}", s.broyden.beta));
        }
        if s.settle_frames == 0 || s.mpc_period == 0 {
            return bad("settle_frames and mpc_period must be at least 1".into());
        }
        let p = &self.perception;
        if !(0.0..=1.0).contains(&p.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", p.gamma));
        }
        if p.template_size < 8 {
            return bad("template_size must be at least 8".into());
        }
        if !(self.insertion.speed > 0.0 && self.insertion.max_advance > 0.0) {
            return bad("insertion speed and max_advance must be positive".into());
        }
        if !(self.safety.rcm_limit > 0.0 && self.safety.max_duration > 0.0) {
            return bad("safety limits must be positive".into());
        }
        Ok(())
    }
}
