use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry and limits of the plugging workspace. All lengths in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    pub home: [f64; 3],
    pub width_max: f64,
    /// Nominal seat of the cable tip in its holder.
    pub holder: [f64; 3],
    pub holder_half_size: f64,
    /// Per-episode random displacement of the cable along the finger axis (y).
    pub holder_jitter: f64,
    /// Centre of the port opening on the hub's top face.
    pub port: [f64; 3],
    pub hub_half_size: f64,
    pub cable_diameter: f64,
    /// Distance from the grasp point down to the plug tip.
    pub plug_length: f64,
    pub grasp_tol_xy: f64,
    pub grasp_tol_z: f64,
    /// Lateral tolerance for the tip to enter the port.
    pub seat_tolerance: f64,
    /// Radius around the port inside which the chamfer pushes the tip sideways.
    pub funnel_radius: f64,
    pub seat_depth: f64,
    /// Commanded push into a blocking surface beyond which the plug is knocked out of the grip.
    pub slip_depth: f64,
    /// Sideways deflection of the plug in the soft grip at full lateral load.
    pub grip_compliance: f64,
    pub max_step: f64,
    pub step_cap: usize,
    /// Nominal control period in seconds.
    pub dt: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            workspace_min: [0.0, 0.0, 0.0],
            workspace_max: [200.0, 200.0, 100.0],
            home: [100.0, 100.0, 70.0],
            width_max: 20.0,
            holder: [40.0, 50.0, 10.0],
            holder_half_size: 8.0,
            holder_jitter: 3.0,
            port: [160.0, 150.0, 25.0],
            hub_half_size: 20.0,
            cable_diameter: 4.0,
            plug_length: 12.0,
            grasp_tol_xy: 8.0,
            grasp_tol_z: 6.0,
            seat_tolerance: 1.5,
            funnel_radius: 5.0,
            seat_depth: 6.0,
            slip_depth: 6.0,
            grip_compliance: 1.0,
            max_step: 3.0,
            step_cap: 300,
            dt: 0.1,
        }
    }
}

fn inside(p: &[f64; 3], lo: &[f64; 3], hi: &[f64; 3]) -> bool {
    (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (&self.workspace_min, &self.workspace_max);
        if (0..3).any(|i| hi[i] <= lo[i]) {
            return Err(Error::Config(format!("empty workspace {lo:?}..{hi:?}")));
        }
        for (name, p) in [("home", &self.home), ("holder", &self.holder), ("port", &self.port)] {
            if !inside(p, lo, hi) {
                return Err(Error::Config(format!("{name} pose {p:?} lies outside the workspace {lo:?}..{hi:?}")));
            }
        }
        let positive = [
            ("width_max", self.width_max),
            ("cable_diameter", self.cable_diameter),
            ("plug_length", self.plug_length),
            ("seat_tolerance", self.seat_tolerance),
            ("funnel_radius", self.funnel_radius),
            ("seat_depth", self.seat_depth),
            ("slip_depth", self.slip_depth),
            ("max_step", self.max_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.cable_diameter >= self.width_max {
            return Err(Error::Config("cable must fit between open fingers".into()));
        }
        if self.step_cap == 0 {
            return Err(Error::Config("step_cap must be at least 1".into()));
        }
        if self.holder_jitter < 0.0 || self.grip_compliance < 0.0 {
            return Err(Error::Config("jitter and compliance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    /// Looks straight down on the whole workspace.
    Overhead,
    /// Looks along +y at the x–z plane.
    Side,
    /// Rides on the gripper looking down through the fingers.
    Wrist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub kind: CameraKind,
    pub height: usize,
    pub width: usize,
    /// Half-width of the wrist camera's field of view, in mm. Ignored by the fixed cameras.
    pub wrist_half_extent: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig { kind: CameraKind::Overhead, height: 32, width: 32, wrist_half_extent: 16.0 }
    }
}

impl CameraConfig {
    pub fn new(kind: CameraKind) -> Self {
        CameraConfig { kind, ..Default::default() }
    }

    /// Overhead, side and wrist cameras at 32×32.
    pub fn default_rig() -> Vec<CameraConfig> {
        vec![
            CameraConfig::new(CameraKind::Overhead),
            CameraConfig::new(CameraKind::Side),
            CameraConfig::new(CameraKind::Wrist),
        ]
    }
}
