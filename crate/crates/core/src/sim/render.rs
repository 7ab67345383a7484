use serde::{Deserialize, Serialize};

use super::config::{CameraConfig, CameraKind, EnvConfig};
use super::world::{CablePhase, WorldState};
use crate::error::{Error, Result};

/// Channel-major float image, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        self.data[(c * self.height + row) * self.width + col] = v;
    }

    /// Interleaved 8-bit RGB, for PNG export.
    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::InvalidShape { op: "to_rgb8", detail: format!("{} channels", self.channels) });
        }
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for c in 0..3 {
                out.push((self.data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Ok(out)
    }
}

type Rgb = [f64; 3];

const FLOOR: Rgb = [0.32, 0.34, 0.30];
const HOLDER: Rgb = [0.75, 0.60, 0.35];
const HUB: Rgb = [0.20, 0.35, 0.70];
const FUNNEL: Rgb = [0.10, 0.18, 0.40];
const BORE: Rgb = [0.02, 0.02, 0.05];
const PLUG: Rgb = [0.95, 0.92, 0.85];
const FINGER: Rgb = [0.85, 0.20, 0.15];
const WRIST: Rgb = [0.55, 0.55, 0.60];

const PLUG_RADIUS: f64 = 2.0;
const FINGER_THICKNESS: f64 = 3.0;
const FINGER_DEPTH: f64 = 6.0;
const FINGER_HEIGHT: f64 = 12.0;
const HOLDER_LIP: f64 = 4.0;

/// Orthographic raster: column `c` spans `u0 + c·du`, row `r` spans downward from `v_top - r·dv`.
struct Canvas {
    img: Image,
    u0: f64,
    du: f64,
    v_top: f64,
    dv: f64,
}

impl Canvas {
    fn new(h: usize, w: usize, u: (f64, f64), v: (f64, f64), background: Rgb) -> Self {
        let mut img = Image::filled(3, h, w, 0.0);
        for r in 0..h {
            for c in 0..w {
                for (k, &b) in background.iter().enumerate() {
                    img.set(k, r, c, b);
                }
            }
        }
        Canvas { img, u0: u.0, du: (u.1 - u.0) / w as f64, v_top: v.1, dv: (v.1 - v.0) / h as f64 }
    }

    fn blend(&mut self, r: usize, c: usize, color: Rgb, cov: f64) {
        if cov <= 0.0 {
            return;
        }
        let cov = cov.min(1.0);
        for (k, &col) in color.iter().enumerate() {
            let old = self.img.get(k, r, c);
            self.img.set(k, r, c, old * (1.0 - cov) + col * cov);
        }
    }

    fn col_range(&self, lo: f64, hi: f64) -> (usize, usize) {
        let w = self.img.width as f64;
        let a = ((lo - self.u0) / self.du).floor().clamp(0.0, w) as usize;
        let b = ((hi - self.u0) / self.du).ceil().clamp(0.0, w) as usize;
        (a, b)
    }

    fn row_range(&self, lo: f64, hi: f64) -> (usize, usize) {
        let h = self.img.height as f64;
        let a = ((self.v_top - hi) / self.dv).floor().clamp(0.0, h) as usize;
        let b = ((self.v_top - lo) / self.dv).ceil().clamp(0.0, h) as usize;
        (a, b)
    }

    /// Axis-aligned rectangle with exact area coverage.
    fn rect(&mut self, u: (f64, f64), v: (f64, f64), color: Rgb) {
        let (c0, c1) = self.col_range(u.0, u.1);
        let (r0, r1) = self.row_range(v.0, v.1);
        for r in r0..r1 {
            let pv_hi = self.v_top - r as f64 * self.dv;
            let pv_lo = pv_hi - self.dv;
            let fy = (pv_hi.min(v.1) - pv_lo.max(v.0)).max(0.0) / self.dv;
            for c in c0..c1 {
                let pu_lo = self.u0 + c as f64 * self.du;
                let pu_hi = pu_lo + self.du;
                let fx = (pu_hi.min(u.1) - pu_lo.max(u.0)).max(0.0) / self.du;
                self.blend(r, c, color, fx * fy);
            }
        }
    }

    /// Disk with a one-pixel linear edge ramp.
    fn disk(&mut self, center: (f64, f64), radius: f64, color: Rgb) {
        let pad = self.du.max(self.dv);
        let (c0, c1) = self.col_range(center.0 - radius - pad, center.0 + radius + pad);
        let (r0, r1) = self.row_range(center.1 - radius - pad, center.1 + radius + pad);
        let px = 0.5 * (self.du + self.dv);
        for r in r0..r1 {
            let pv = self.v_top - (r as f64 + 0.5) * self.dv;
            for c in c0..c1 {
                let pu = self.u0 + (c as f64 + 0.5) * self.du;
                let d = (pu - center.0).hypot(pv - center.1);
                self.blend(r, c, color, (0.5 - (d - radius) / px).clamp(0.0, 1.0));
            }
        }
    }
}

fn shade(color: Rgb, z: f64, z_max: f64) -> Rgb {
    let k = 0.55 + 0.45 * (z / z_max).clamp(0.0, 1.0);
    [color[0] * k, color[1] * k, color[2] * k]
}

/// Opening drawn between the finger pads; a grasped plug holds them apart.
fn finger_gap(cfg: &EnvConfig, state: &WorldState) -> f64 {
    let w = state.robot.width;
    if state.cable_phase == CablePhase::Grasped {
        w.max(cfg.cable_diameter)
    } else {
        w
    }
}

fn draw_top_down(cv: &mut Canvas, cfg: &EnvConfig, state: &WorldState) {
    let zmax = cfg.workspace_max[2];
    let [hx, hy, hz] = state.holder_pose;
    let hs = cfg.holder_half_size;
    cv.rect((hx - hs, hx + hs), (hy - hs, hy + hs), shade(HOLDER, hz + HOLDER_LIP, zmax));
    let [px, py, pz] = state.port_pose;
    let h = cfg.hub_half_size;
    cv.rect((px - h, px + h), (py - h, py + h), shade(HUB, pz, zmax));
    cv.disk((px, py), cfg.funnel_radius, shade(FUNNEL, pz, zmax));
    cv.disk((px, py), PLUG_RADIUS + 0.5, BORE);

    let tip = state.cable_tip;
    let plug_top = match state.cable_phase {
        CablePhase::Dropped => tip[2] + cfg.cable_diameter,
        _ => tip[2] + cfg.plug_length,
    };
    cv.disk((tip[0], tip[1]), PLUG_RADIUS, shade(PLUG, plug_top, zmax));

    let r = state.robot;
    let gap = finger_gap(cfg, state);
    let fc = shade(FINGER, r.z, zmax);
    for side in [-1.0, 1.0] {
        let inner = r.x + side * gap / 2.0;
        let outer = inner + side * FINGER_THICKNESS;
        cv.rect((inner.min(outer), inner.max(outer)), (r.y - FINGER_DEPTH / 2.0, r.y + FINGER_DEPTH / 2.0), fc);
    }
}

fn draw_side(cv: &mut Canvas, cfg: &EnvConfig, state: &WorldState) {
    // camera looks along +y: far objects (large y) first
    let mut items: Vec<(f64, Box<dyn Fn(&mut Canvas)>)> = Vec::new();
    let [hx, hy, hz] = state.holder_pose;
    let hs = cfg.holder_half_size;
    items.push((hy, Box::new(move |cv: &mut Canvas| cv.rect((hx - hs, hx + hs), (0.0, hz + HOLDER_LIP), HOLDER))));
    let [px, py, pz] = state.port_pose;
    let h = cfg.hub_half_size;
    items.push((py, Box::new(move |cv: &mut Canvas| cv.rect((px - h, px + h), (0.0, pz), HUB))));

    let tip = state.cable_tip;
    let (plug_u, plug_v) = match state.cable_phase {
        CablePhase::Dropped => ((tip[0] - cfg.plug_length / 2.0, tip[0] + cfg.plug_length / 2.0), (tip[2], tip[2] + cfg.cable_diameter)),
        _ => ((tip[0] - PLUG_RADIUS, tip[0] + PLUG_RADIUS), (tip[2], tip[2] + cfg.plug_length)),
    };
    items.push((tip[1], Box::new(move |cv: &mut Canvas| cv.rect(plug_u, plug_v, PLUG))));

    let r = state.robot;
    let gap = finger_gap(cfg, state);
    items.push((
        r.y - 1e-6,
        Box::new(move |cv: &mut Canvas| {
            for side in [-1.0, 1.0] {
                let inner = r.x + side * gap / 2.0;
                let outer = inner + side * FINGER_THICKNESS;
                cv.rect((inner.min(outer), inner.max(outer)), (r.z - 4.0, r.z + FINGER_HEIGHT - 4.0), FINGER);
            }
            let half = gap / 2.0 + FINGER_THICKNESS;
            cv.rect((r.x - half, r.x + half), (r.z + FINGER_HEIGHT - 4.0, r.z + FINGER_HEIGHT + 2.0), WRIST);
        }),
    ));
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, draw) in items {
        draw(cv);
    }
}

fn render_one(cfg: &EnvConfig, state: &WorldState, cam: &CameraConfig) -> Result<Image> {
    if cam.height == 0 || cam.width == 0 {
        return Err(Error::Config(format!("{:?} camera has a zero-area viewport {}x{}", cam.kind, cam.height, cam.width)));
    }
    let (lo, hi) = (cfg.workspace_min, cfg.workspace_max);
    let mut cv = match cam.kind {
        CameraKind::Overhead => Canvas::new(cam.height, cam.width, (lo[0], hi[0]), (lo[1], hi[1]), FLOOR),
        CameraKind::Side => Canvas::new(cam.height, cam.width, (lo[0], hi[0]), (lo[2], hi[2]), [0.80, 0.82, 0.85]),
        CameraKind::Wrist => {
            let e = cam.wrist_half_extent;
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Config(format!("wrist camera half extent must be positive, got {e}")));
            }
            let r = state.robot;
            Canvas::new(cam.height, cam.width, (r.x - e, r.x + e), (r.y - e, r.y + e), FLOOR)
        }
    };
    match cam.kind {
        CameraKind::Side => draw_side(&mut cv, cfg, state),
        _ => draw_top_down(&mut cv, cfg, state),
    }
    Ok(cv.img)
}

/// Renders one image per camera.
pub fn render_views(cfg: &EnvConfig, state: &WorldState, cameras: &[CameraConfig]) -> Result<Vec<Image>> {
    if cameras.is_empty() {
        return Err(Error::Config("at least one camera is required".into()));
    }
    cameras.iter().map(|cam| render_one(cfg, state, cam)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::world::Env;

    fn setup() -> (EnvConfig, WorldState) {
        let env = Env::new(EnvConfig::default()).unwrap();
        let s = env.reset(5);
        (env.config().clone(), s)
    }

    #[test]
    fn three_cameras_give_three_images_in_range() {
        let (cfg, s) = setup();
        let imgs = render_views(&cfg, &s, &CameraConfig::default_rig()).unwrap();
        assert_eq!(imgs.len(), 3);
        for img in &imgs {
            assert_eq!(img.shape(), [3, 32, 32]);
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(imgs, render_views(&cfg, &s, &CameraConfig::default_rig()).unwrap());
    }

    #[test]
    fn side_camera_sees_robot_x() {
        let (cfg, s) = setup();
        let mut moved = s.clone();
        moved.robot.x += 10.0;
        let cam = [CameraConfig::new(CameraKind::Side)];
        let a = render_views(&cfg, &s, &cam).unwrap();
        let b = render_views(&cfg, &moved, &cam).unwrap();
        assert!(a[0].data.iter().zip(&b[0].data).any(|(x, y)| x != y));
    }

    #[test]
    fn wrist_camera_sees_sub_millimetre_offsets() {
        let (cfg, mut s) = setup();
        s.robot.x = s.port_pose[0];
        s.robot.y = s.port_pose[1];
        let cam = [CameraConfig::new(CameraKind::Wrist)];
        let a = render_views(&cfg, &s, &cam).unwrap();
        s.robot.x += 0.5;
        let b = render_views(&cfg, &s, &cam).unwrap();
        assert!(a[0].data.iter().zip(&b[0].data).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    #[test]
    fn zero_area_viewport_rejected() {
        let (cfg, s) = setup();
        let cam = CameraConfig { height: 0, ..CameraConfig::default() };
        assert!(render_views(&cfg, &s, &[cam]).is_err());
        assert!(render_views(&cfg, &s, &[]).is_err());
    }
}
