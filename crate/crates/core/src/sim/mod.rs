//! Desk-scale cable-plugging simulator, orthographic renderer and scripted expert.

mod config;
mod expert;
mod render;
mod world;

pub use config::{CameraConfig, CameraKind, EnvConfig};
pub use expert::scripted_expert;
pub use render::{render_views, Image};
pub use world::{success, Action, CablePhase, ContactState, Env, RobotState, Transition, WorldState};
