use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::EnvConfig;
use crate::error::{Error, Result};
use crate::math::{rng_from_seed, Rng};

/// Gripper position and opening, mm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub width: f64,
}

impl RobotState {
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.width]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        RobotState { x: a[0], y: a[1], z: a[2], width: a[3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CablePhase {
    InHolder,
    Grasped,
    Inserted,
    Dropped,
}

impl CablePhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, CablePhase::Inserted | CablePhase::Dropped)
    }
}

/// What the fingertip gel feels during the last step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactState {
    /// Normalised squeeze on the plug, `[0, 1]`.
    pub grip_pressure: f64,
    /// Normalised sideways load on the plug tip.
    pub lateral_force: [f64; 2],
    pub in_contact: bool,
    /// Where the plug sits on the gel, normalised to `[-1, 1]` on each gel axis.
    pub patch_center: [f64; 2],
}

/// Commanded motion for one control step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub width_cmd: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64, dz: f64, width_cmd: f64) -> Self {
        Action { dx, dy, dz, width_cmd }
    }

    /// Limits each positional delta to `±max_step` and the width to `[0, width_max]`.
    pub fn clamped(&self, max_step: f64, width_max: f64) -> Action {
        let c = |v: f64| if v.is_finite() { v.clamp(-max_step, max_step) } else { 0.0 };
        Action {
            dx: c(self.dx),
            dy: c(self.dy),
            dz: c(self.dz),
            width_cmd: if self.width_cmd.is_finite() { self.width_cmd.clamp(0.0, width_max) } else { width_max },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub robot: RobotState,
    pub cable_phase: CablePhase,
    pub cable_tip: [f64; 3],
    pub holder_pose: [f64; 3],
    pub port_pose: [f64; 3],
    pub step_count: usize,
    /// Plug position relative to the fingers, set at grasp time.
    pub grasp_offset: [f64; 2],
    pub contact: ContactState,
}

/// Result of one [`Env::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: WorldState,
    pub contact: ContactState,
    pub terminal: bool,
}

/// The plugging simulator. Stateless: every call maps an input state to a new one.
#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
}

const GEL_HALF_LENGTH: f64 = 8.0;

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Env { config })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Robot at home with open fingers, cable seated in its holder. The seed
    /// only decides where in the holder slot the cable rests.
    pub fn reset(&self, seed: u64) -> WorldState {
        let cfg = &self.config;
        let mut rng: Rng = rng_from_seed(seed);
        let jitter = if cfg.holder_jitter > 0.0 {
            rng.random_range(-cfg.holder_jitter..=cfg.holder_jitter)
        } else {
            0.0
        };
        let [hx, hy, hz] = cfg.holder;
        WorldState {
            robot: RobotState { x: cfg.home[0], y: cfg.home[1], z: cfg.home[2], width: cfg.width_max },
            cable_phase: CablePhase::InHolder,
            cable_tip: [hx, hy + jitter, hz],
            holder_pose: cfg.holder,
            port_pose: cfg.port,
            step_count: 0,
            grasp_offset: [0.0, 0.0],
            contact: ContactState::default(),
        }
    }

    fn clamp_ws(&self, p: [f64; 3]) -> [f64; 3] {
        let (lo, hi) = (&self.config.workspace_min, &self.config.workspace_max);
        [p[0].clamp(lo[0], hi[0]), p[1].clamp(lo[1], hi[1]), p[2].clamp(lo[2], hi[2])]
    }

    fn on_hub(&self, x: f64, y: f64) -> bool {
        let h = self.config.hub_half_size;
        let [px, py, _] = self.config.port;
        (x - px).abs() <= h && (y - py).abs() <= h
    }

    /// Height of the surface a falling or pressed object meets at `(x, y)`.
    pub fn surface_height(&self, x: f64, y: f64) -> f64 {
        if self.on_hub(x, y) {
            self.config.port[2]
        } else {
            self.config.workspace_min[2]
        }
    }

    fn tip_port_error(&self, tip: &[f64; 3]) -> [f64; 2] {
        [tip[0] - self.config.port[0], tip[1] - self.config.port[1]]
    }

    /// True while the plug tip sits inside the port bore.
    pub fn tip_in_port(&self, state: &WorldState) -> bool {
        let e = self.tip_port_error(&state.cable_tip);
        state.cable_phase != CablePhase::InHolder
            && state.cable_tip[2] < self.config.port[2] - 1e-9
            && e[0].hypot(e[1]) <= self.config.seat_tolerance + 1e-9
    }

    pub fn step(&self, state: &WorldState, action: &Action) -> Result<Transition> {
        let cfg = &self.config;
        if state.cable_phase.is_terminal() || state.step_count >= cfg.step_cap {
            return Err(Error::Env(format!(
                "step on terminal state (phase {:?}, step {})",
                state.cable_phase, state.step_count
            )));
        }
        let a = action.clamped(cfg.max_step, cfg.width_max);
        let mut s = state.clone();
        let r = state.robot;
        let mut target = self.clamp_ws([r.x + a.dx, r.y + a.dy, r.z + a.dz]);
        let mut contact = ContactState::default();

        match state.cable_phase {
            CablePhase::InHolder => {
                let closing = r.width >= cfg.cable_diameter && a.width_cmd < cfg.cable_diameter;
                s.robot = RobotState { x: target[0], y: target[1], z: target[2], width: a.width_cmd };
                let tip = state.cable_tip;
                let grasp_z = tip[2] + cfg.plug_length;
                let dxy = (target[0] - tip[0]).hypot(target[1] - tip[1]);
                if closing && dxy <= cfg.grasp_tol_xy && (target[2] - grasp_z).abs() <= cfg.grasp_tol_z {
                    // fingers close along x and centre the plug on that axis; along the
                    // finger (y) the plug keeps wherever it was caught
                    s.cable_phase = CablePhase::Grasped;
                    s.grasp_offset = [0.0, tip[1] - target[1]];
                    // the plug is pulled up to the grasp height
                    s.cable_tip = [target[0], tip[1], target[2] - cfg.plug_length];
                    contact.grip_pressure = self.grip_pressure(a.width_cmd);
                    contact.patch_center = self.patch_center(s.grasp_offset);
                }
            }
            CablePhase::Grasped => {
                if a.width_cmd >= cfg.cable_diameter {
                    s.robot = RobotState { x: target[0], y: target[1], z: target[2], width: a.width_cmd };
                    s.cable_phase = CablePhase::Dropped;
                    let t = state.cable_tip;
                    s.cable_tip = [t[0], t[1], self.surface_height(t[0], t[1])];
                } else {
                    let off = state.grasp_offset;
                    let tip_of = |p: &[f64; 3]| [p[0] + off[0], p[1] + off[1], p[2] - cfg.plug_length];
                    let in_port = self.tip_in_port(state);
                    if in_port {
                        // the bore holds the plug laterally
                        target[0] = r.x;
                        target[1] = r.y;
                    }
                    let tip_t = tip_of(&target);
                    let e = self.tip_port_error(&tip_t);
                    let e_norm = e[0].hypot(e[1]);
                    let aligned = self.on_hub(tip_t[0], tip_t[1]) && e_norm <= cfg.seat_tolerance;
                    let surface = self.surface_height(tip_t[0], tip_t[1]);
                    if (in_port || aligned) && tip_t[2] < surface {
                        let seat = cfg.port[2] - cfg.seat_depth;
                        if tip_t[2] <= seat {
                            target[2] = seat + cfg.plug_length;
                            s.cable_phase = CablePhase::Inserted;
                        }
                    } else if tip_t[2] < surface {
                        let pen = surface - tip_t[2];
                        target[2] = surface + cfg.plug_length;
                        contact.in_contact = true;
                        if self.on_hub(tip_t[0], tip_t[1]) && e_norm < cfg.funnel_radius && e_norm > 1e-12 {
                            let mag = (pen / cfg.slip_depth).min(1.0);
                            contact.lateral_force = [-e[0] / e_norm * mag, -e[1] / e_norm * mag];
                        }
                        if pen > cfg.slip_depth {
                            s.cable_phase = CablePhase::Dropped;
                        }
                    }
                    s.robot = RobotState { x: target[0], y: target[1], z: target[2], width: a.width_cmd };
                    contact.grip_pressure = self.grip_pressure(a.width_cmd);
                    contact.patch_center = self.patch_center(off);
                    let tip = tip_of(&target);
                    let defl = cfg.grip_compliance;
                    s.cable_tip = [
                        tip[0] + defl * contact.lateral_force[0],
                        tip[1] + defl * contact.lateral_force[1],
                        tip[2],
                    ];
                    if s.cable_phase == CablePhase::Dropped {
                        let t = s.cable_tip;
                        s.cable_tip = [t[0], t[1], self.surface_height(t[0], t[1])];
                        contact = ContactState::default();
                    }
                }
            }
            CablePhase::Inserted | CablePhase::Dropped => unreachable!("terminal phases rejected above"),
        }

        s.step_count += 1;
        s.contact = contact;
        let terminal = s.cable_phase.is_terminal() || s.step_count >= cfg.step_cap;
        Ok(Transition { state: s, contact, terminal })
    }

    fn grip_pressure(&self, width: f64) -> f64 {
        let d = self.config.cable_diameter;
        ((d - width) / d).clamp(0.0, 1.0)
    }

    fn patch_center(&self, offset: [f64; 2]) -> [f64; 2] {
        [(offset[1] / GEL_HALF_LENGTH).clamp(-1.0, 1.0), 0.0]
    }
}

/// True iff the cable ended up seated in the port.
pub fn success(state: &WorldState) -> bool {
    state.cable_phase == CablePhase::Inserted
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> Env {
        Env::new(EnvConfig::default()).unwrap()
    }

    fn grasped_above_port(env: &Env, height: f64) -> WorldState {
        let cfg = env.config();
        let mut s = env.reset(0);
        s.cable_phase = CablePhase::Grasped;
        s.grasp_offset = [0.0, 0.0];
        s.robot = RobotState { x: cfg.port[0], y: cfg.port[1], z: cfg.port[2] + cfg.plug_length + height, width: 0.0 };
        s.cable_tip = [cfg.port[0], cfg.port[1], cfg.port[2] + height];
        s
    }

    #[test]
    fn reset_is_deterministic_and_in_holder() {
        let e = env();
        let a = e.reset(7);
        assert_eq!(a, e.reset(7));
        assert_eq!(a.cable_phase, CablePhase::InHolder);
        assert_eq!(a.step_count, 0);
    }

    #[test]
    fn aligned_descent_inserts() {
        let e = env();
        let mut s = grasped_above_port(&e, 2.0);
        let mut terminal = false;
        for _ in 0..5 {
            let t = e.step(&s, &Action::new(0.0, 0.0, -3.0, 0.0)).unwrap();
            s = t.state;
            terminal = t.terminal;
            if terminal {
                break;
            }
        }
        assert!(terminal);
        assert_eq!(s.cable_phase, CablePhase::Inserted);
        assert!(success(&s));
    }

    #[test]
    fn opening_midair_drops() {
        let e = env();
        let s = grasped_above_port(&e, 30.0);
        let t = e.step(&s, &Action::new(0.0, 0.0, 0.0, 10.0)).unwrap();
        assert_eq!(t.state.cable_phase, CablePhase::Dropped);
        assert!(t.terminal);
        assert!(!success(&t.state));
    }

    #[test]
    fn step_cap_terminates_null_actions() {
        let e = env();
        let mut s = e.reset(1);
        let mut n = 0;
        loop {
            let t = e.step(&s, &Action::new(0.0, 0.0, 0.0, e.config().width_max)).unwrap();
            n += 1;
            s = t.state;
            if t.terminal {
                break;
            }
        }
        assert_eq!(n, 300);
        assert!(e.step(&s, &Action::default()).is_err());
    }

    #[test]
    fn misaligned_push_is_blocked_with_centering_force() {
        let e = env();
        let mut s = grasped_above_port(&e, 0.5);
        s.grasp_offset = [3.0, 0.0];
        s.cable_tip[0] += 3.0;
        let t = e.step(&s, &Action::new(0.0, 0.0, -2.0, 0.0)).unwrap();
        assert_eq!(t.state.cable_phase, CablePhase::Grasped);
        assert!(t.contact.in_contact);
        assert!(t.contact.lateral_force[0] < 0.0);
        assert_eq!(t.contact.lateral_force[1], 0.0);
    }

    #[test]
    fn hard_push_knocks_plug_out() {
        let e = env();
        let mut s = grasped_above_port(&e, 0.0);
        s.grasp_offset = [3.0, 0.0];
        s.cable_tip[0] += 3.0;
        let slip = e.config().slip_depth;
        let mut cfg = e.config().clone();
        cfg.max_step = slip + 2.0;
        let e2 = Env::new(cfg).unwrap();
        let t = e2.step(&s, &Action::new(0.0, 0.0, -(slip + 1.0), 0.0)).unwrap();
        assert_eq!(t.state.cable_phase, CablePhase::Dropped);
    }

    #[test]
    fn grasp_requires_closing_near_cable() {
        let e = env();
        let cfg = e.config().clone();
        let mut s = e.reset(3);
        s.robot = RobotState {
            x: s.cable_tip[0] + 1.0,
            y: s.cable_tip[1] - 2.0,
            z: s.cable_tip[2] + cfg.plug_length,
            width: cfg.width_max,
        };
        let t = e.step(&s, &Action::new(0.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(t.state.cable_phase, CablePhase::Grasped);
        assert!((t.state.grasp_offset[1] - 2.0).abs() < 1e-12);
        assert!(t.contact.grip_pressure > 0.0);

        let mut far = e.reset(3);
        far.robot.z = 60.0;
        let t = e.step(&far, &Action::new(0.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(t.state.cable_phase, CablePhase::InHolder);
    }
}
