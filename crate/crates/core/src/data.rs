//! Observations and recorded demonstrations shared by training and evaluation.

use serde::{Deserialize, Serialize};

use crate::encoders::normalize_position;
use crate::error::{Error, Result};
use crate::sim::{render_views, Action, CameraConfig, Env, EnvConfig, Image, RobotState, WorldState};
use crate::tactile::{simulate_sensor, TactileConfig, TactileFrame};

/// Everything a policy may see at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub images: Vec<Image>,
    pub tactile: TactileFrame,
    pub robot: RobotState,
}

/// Sensor suite: cameras plus the fingertip gel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub cameras: Vec<CameraConfig>,
    pub tactile: TactileConfig,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig { cameras: CameraConfig::default_rig(), tactile: TactileConfig::default() }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Config("at least one camera is required".into()));
        }
        let (h, w) = (self.cameras[0].height, self.cameras[0].width);
        if self.cameras.iter().any(|c| c.height != h || c.width != w) {
            return Err(Error::Config("all cameras must share one resolution".into()));
        }
        self.tactile.validate()
    }
}

pub fn observe(env: &Env, state: &WorldState, sensors: &SensorConfig) -> Result<Observation> {
    Ok(Observation {
        images: render_views(env.config(), state, &sensors.cameras)?,
        tactile: simulate_sensor(&state.contact, &sensors.tactile)?,
        robot: state.robot,
    })
}

/// Absolute target the robot is asked to reach by `action` from `robot`.
pub fn goal_of(env: &EnvConfig, robot: &RobotState, action: &Action) -> [f64; 4] {
    let a = action.clamped(env.max_step, env.width_max);
    [robot.x + a.dx, robot.y + a.dy, robot.z + a.dz, a.width_cmd]
}

/// One demonstration. Per-timestep vectors all share the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub expert_noise_std: f64,
    /// `images[t][camera]`
    pub images: Vec<Vec<Image>>,
    pub tactile: Vec<TactileFrame>,
    pub states: Vec<RobotState>,
    pub goals: Vec<[f64; 4]>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn num_cameras(&self) -> usize {
        self.images.first().map_or(0, |v| v.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.images.len() != n || self.tactile.len() != n || self.goals.len() != n {
            return Err(Error::InvalidShape {
                op: "trajectory",
                detail: format!(
                    "lengths differ: states {n}, images {}, tactile {}, goals {}",
                    self.images.len(),
                    self.tactile.len(),
                    self.goals.len()
                ),
            });
        }
        let c = self.num_cameras();
        if self.images.iter().any(|v| v.len() != c) {
            return Err(Error::InvalidShape { op: "trajectory", detail: "camera count changes over time".into() });
        }
        Ok(())
    }

    pub fn observation(&self, t: usize) -> Observation {
        Observation { images: self.images[t].clone(), tactile: self.tactile[t].clone(), robot: self.states[t] }
    }
}

/// Read access to paired vision/tactile samples, as consumed by contrastive pretraining.
pub trait PairedSource {
    fn num_trajectories(&self) -> usize;
    fn trajectory_len(&self, traj: usize) -> usize;
    fn num_cameras(&self) -> usize;
    fn image(&self, traj: usize, t: usize, camera: usize) -> &Image;
    fn strain(&self, traj: usize, t: usize) -> &crate::tactile::StrainMap;
    /// Normalised robot state, see [`normalize_position`].
    fn position(&self, traj: usize, t: usize) -> [f64; 4];
}

/// Demonstrations viewed as paired samples.
pub struct Demos<'a> {
    pub records: &'a [TrajectoryRecord],
    pub env: &'a EnvConfig,
}

impl PairedSource for Demos<'_> {
    fn num_trajectories(&self) -> usize {
        self.records.len()
    }

    fn trajectory_len(&self, traj: usize) -> usize {
        self.records[traj].len()
    }

    fn num_cameras(&self) -> usize {
        self.records.first().map_or(0, |r| r.num_cameras())
    }

    fn image(&self, traj: usize, t: usize, camera: usize) -> &Image {
        &self.records[traj].images[t][camera]
    }

    fn strain(&self, traj: usize, t: usize) -> &crate::tactile::StrainMap {
        &self.records[traj].tactile[t].strain
    }

    fn position(&self, traj: usize, t: usize) -> [f64; 4] {
        normalize_position(&self.records[traj].states[t], self.env)
    }
}
