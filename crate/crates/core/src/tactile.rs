//! Synthetic gel sensor: contact state to marker field and depth, dense strain
//! maps by marker interpolation, LAB visualisation and strain metrics.
//!
//! Gel coordinates are normalised: `u ∈ [-1, 1]` across the map width,
//! `v ∈ [-1, 1]` down its height. Strain values are in the same normalised
//! unit as [`ContactState::lateral_force`], scaled by the cover attenuation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{ContactState, Image};

pub const MARKER_ROWS: usize = 7;
pub const MARKER_COLS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TactileConfig {
    pub height: usize,
    pub width: usize,
    /// Multiplies every output magnitude; models the protective cover over the gel.
    pub cover_attenuation: f64,
    /// Largest tangential displacement the gel can show.
    pub elastic_limit: f64,
    /// Width of the shear field around the contact patch.
    pub shear_sigma: f64,
    /// Depth bump widths across and along the plug.
    pub depth_sigma_u: f64,
    pub depth_sigma_v: f64,
}

impl Default for TactileConfig {
    fn default() -> Self {
        TactileConfig {
            height: 24,
            width: 32,
            cover_attenuation: 0.6,
            elastic_limit: 1.0,
            shear_sigma: 0.5,
            depth_sigma_u: 0.3,
            depth_sigma_v: 0.6,
        }
    }
}

impl TactileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < MARKER_ROWS || self.width < MARKER_COLS {
            return Err(Error::Config(format!(
                "strain map {}x{} is smaller than the {MARKER_ROWS}x{MARKER_COLS} marker grid",
                self.height, self.width
            )));
        }
        if !(self.cover_attenuation > 0.0 && self.cover_attenuation <= 1.0) {
            return Err(Error::Config(format!("cover_attenuation must lie in (0, 1], got {}", self.cover_attenuation)));
        }
        for (name, v) in [
            ("elastic_limit", self.elastic_limit),
            ("shear_sigma", self.shear_sigma),
            ("depth_sigma_u", self.depth_sigma_u),
            ("depth_sigma_v", self.depth_sigma_v),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Tangential displacement of each tracking marker, row-major 7×9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerGrid {
    displacements: Vec<[f64; 2]>,
}

impl MarkerGrid {
    pub fn new(displacements: Vec<[f64; 2]>) -> Result<Self> {
        if displacements.len() != MARKER_ROWS * MARKER_COLS {
            return Err(Error::InvalidShape {
                op: "MarkerGrid::new",
                detail: format!("expected {} markers, got {}", MARKER_ROWS * MARKER_COLS, displacements.len()),
            });
        }
        Ok(MarkerGrid { displacements })
    }

    pub fn zeros() -> Self {
        MarkerGrid { displacements: vec![[0.0; 2]; MARKER_ROWS * MARKER_COLS] }
    }

    pub fn constant(d: [f64; 2]) -> Self {
        MarkerGrid { displacements: vec![d; MARKER_ROWS * MARKER_COLS] }
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 2] {
        self.displacements[row * MARKER_COLS + col]
    }

    pub fn displacements(&self) -> &[[f64; 2]] {
        &self.displacements
    }

    /// Gel coordinates `(u, v)` of a marker site.
    pub fn site(row: usize, col: usize) -> (f64, f64) {
        (-1.0 + 2.0 * col as f64 / (MARKER_COLS - 1) as f64, -1.0 + 2.0 * row as f64 / (MARKER_ROWS - 1) as f64)
    }
}

/// Dense `(x, y, z)` strain, channel-major `3×H×W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrainMap {
    pub height: usize,
    pub width: usize,
    pub strain: Vec<f64>,
    pub cover_attenuation: f64,
}

impl StrainMap {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.strain[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TactileFrame {
    pub markers: MarkerGrid,
    /// Normal strain, `H×W`, non-negative.
    pub depth: Vec<f64>,
    pub strain: StrainMap,
}

impl TactileFrame {
    /// All-zero frame, as produced by a sensor touching nothing.
    pub fn empty(cfg: &TactileConfig) -> Self {
        let n = cfg.height * cfg.width;
        TactileFrame {
            markers: MarkerGrid::zeros(),
            depth: vec![0.0; n],
            strain: StrainMap { height: cfg.height, width: cfg.width, strain: vec![0.0; 3 * n], cover_attenuation: cfg.cover_attenuation },
        }
    }

    /// Builds a consistent frame from markers and depth.
    pub fn from_parts(markers: MarkerGrid, depth: Vec<f64>, height: usize, width: usize, cover_attenuation: f64) -> Result<Self> {
        if depth.len() != height * width {
            return Err(Error::InvalidShape {
                op: "TactileFrame::from_parts",
                detail: format!("depth has {} values for a {height}x{width} map", depth.len()),
            });
        }
        let mut strain = strain_from_markers(&markers, height, width)?;
        strain.extend_from_slice(&depth);
        Ok(TactileFrame { markers, depth, strain: StrainMap { height, width, strain, cover_attenuation } })
    }

    /// Multiplies every displacement and depth value by `k`.
    pub fn scaled(&self, k: f64) -> TactileFrame {
        let markers = MarkerGrid { displacements: self.markers.displacements.iter().map(|d| [d[0] * k, d[1] * k]).collect() };
        TactileFrame {
            markers,
            depth: self.depth.iter().map(|v| v * k).collect(),
            strain: StrainMap { strain: self.strain.strain.iter().map(|v| v * k).collect(), ..self.strain.clone() },
        }
    }

    pub fn height(&self) -> usize {
        self.strain.height
    }

    pub fn width(&self) -> usize {
        self.strain.width
    }
}

fn gaussian(du: f64, dv: f64, su: f64, sv: f64) -> f64 {
    (-0.5 * ((du / su).powi(2) + (dv / sv).powi(2))).exp()
}

/// Tangential field the gel would show at `(u, v)` for this contact, before sampling by markers.
pub fn ground_truth_shear(contact: &ContactState, cfg: &TactileConfig, u: f64, v: f64) -> [f64; 2] {
    let [pu, pv] = contact.patch_center;
    let w = gaussian(u - pu, v - pv, cfg.shear_sigma, cfg.shear_sigma);
    let lim = cfg.elastic_limit;
    [
        cfg.cover_attenuation * (contact.lateral_force[0] * w).clamp(-lim, lim),
        cfg.cover_attenuation * (contact.lateral_force[1] * w).clamp(-lim, lim),
    ]
}

/// Gel coordinates `(u, v)` of pixel `(row, col)` in an `h×w` map.
pub fn pixel_uv(row: usize, col: usize, h: usize, w: usize) -> (f64, f64) {
    (-1.0 + 2.0 * col as f64 / (w - 1) as f64, -1.0 + 2.0 * row as f64 / (h - 1) as f64)
}

/// Forward sensor model.
pub fn simulate_sensor(contact: &ContactState, cfg: &TactileConfig) -> Result<TactileFrame> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut markers = Vec::with_capacity(MARKER_ROWS * MARKER_COLS);
    for r in 0..MARKER_ROWS {
        for c in 0..MARKER_COLS {
            let (u, v) = MarkerGrid::site(r, c);
            markers.push(ground_truth_shear(contact, cfg, u, v));
        }
    }
    let p = contact.grip_pressure.max(0.0);
    let [pu, pv] = contact.patch_center;
    let mut depth = vec![0.0; h * w];
    if p > 0.0 {
        for r in 0..h {
            for c in 0..w {
                let (u, v) = pixel_uv(r, c, h, w);
                depth[r * w + c] = cfg.cover_attenuation * p * gaussian(u - pu, v - pv, cfg.depth_sigma_u, cfg.depth_sigma_v);
            }
        }
    }
    TactileFrame::from_parts(MarkerGrid { displacements: markers }, depth, h, w, cfg.cover_attenuation)
}

/// Bilinear interpolation of the marker grid onto an `H×W` pixel grid whose
/// corners coincide with the corner markers. Returns `2×H×W` (x then y).
pub fn strain_from_markers(markers: &MarkerGrid, height: usize, width: usize) -> Result<Vec<f64>> {
    if height < MARKER_ROWS || width < MARKER_COLS {
        return Err(Error::InvalidShape {
            op: "strain_from_markers",
            detail: format!("target {height}x{width} is smaller than the {MARKER_ROWS}x{MARKER_COLS} grid"),
        });
    }
    let n = height * width;
    let mut out = vec![0.0; 2 * n];
    for r in 0..height {
        let gv = r as f64 * (MARKER_ROWS - 1) as f64 / (height - 1) as f64;
        let i0 = (gv.floor() as usize).min(MARKER_ROWS - 2);
        let tv = gv - i0 as f64;
        for c in 0..width {
            let gu = c as f64 * (MARKER_COLS - 1) as f64 / (width - 1) as f64;
            let j0 = (gu.floor() as usize).min(MARKER_COLS - 2);
            let tu = gu - j0 as f64;
            let (a, b) = (markers.get(i0, j0), markers.get(i0, j0 + 1));
            let (cc, d) = (markers.get(i0 + 1, j0), markers.get(i0 + 1, j0 + 1));
            for k in 0..2 {
                let top = a[k] + (b[k] - a[k]) * tu;
                let bottom = cc[k] + (d[k] - cc[k]) * tu;
                out[k * n + r * width + c] = top + (bottom - top) * tv;
            }
        }
    }
    Ok(out)
}

/// Mean over pixels of `|x| + |y|` tangential strain.
pub fn mean_abs_tangential_strain(frame: &TactileFrame) -> f64 {
    let s = &frame.strain;
    let n = s.height * s.width;
    if n == 0 {
        return 0.0;
    }
    let (x, y) = (s.channel(0), s.channel(1));
    x.iter().zip(y).map(|(a, b)| a.abs() + b.abs()).sum::<f64>() / n as f64
}

/// LAB mapping gains: lightness per unit depth, chroma per unit tangential strain.
pub const LAB_DEPTH_GAIN: f64 = 40.0;
pub const LAB_STRAIN_GAIN: f64 = 60.0;
const LAB_BASE_L: f64 = 50.0;

// linear sRGB to XYZ (D65); the white point is its row sums so grey stays neutral
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

fn white() -> [f64; 3] {
    RGB_TO_XYZ.map(|row| row.iter().sum())
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    m.map(|row| row[0] * v[0] + row[1] * v[1] + row[2] * v[2])
}

fn xyz_to_rgb_matrix() -> [[f64; 3]; 3] {
    let m = RGB_TO_XYZ;
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    let det = m[0][0] * adj[0][0] + m[0][1] * adj[1][0] + m[0][2] * adj[2][0];
    adj.map(|row| row.map(|v| v / det))
}

const LAB_D: f64 = 6.0 / 29.0;

pub fn lab_to_srgb(l: f64, a: f64, b: f64) -> [f64; 3] {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let finv = |t: f64| if t > LAB_D { t * t * t } else { 3.0 * LAB_D * LAB_D * (t - 4.0 / 29.0) };
    let w = white();
    let xyz = [w[0] * finv(fx), w[1] * finv(fy), w[2] * finv(fz)];
    let gamma = |c: f64| {
        let c = c.clamp(0.0, 1.0);
        if c <= 0.003_130_8 { 12.92 * c } else { 1.055 * c.powf(1.0 / 2.4) - 0.055 }
    };
    mat_vec(&xyz_to_rgb_matrix(), xyz).map(gamma)
}

pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = |c: f64| if c <= 0.040_45 { c / 12.92 } else { ((c + 0.055) / 1.055).powf(2.4) };
    let xyz = mat_vec(&RGB_TO_XYZ, rgb.map(lin));
    let f = |t: f64| if t > LAB_D * LAB_D * LAB_D { t.cbrt() } else { t / (3.0 * LAB_D * LAB_D) + 4.0 / 29.0 };
    let w = white();
    let (fx, fy, fz) = (f(xyz[0] / w[0]), f(xyz[1] / w[1]), f(xyz[2] / w[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Depth drives lightness, x-strain the blue–yellow (b) axis, y-strain the red–green (a) axis.
pub fn render_lab(frame: &TactileFrame) -> Image {
    let (h, w) = (frame.height(), frame.width());
    let n = h * w;
    let s = &frame.strain.strain;
    let mut img = Image::filled(3, h, w, 0.0);
    for p in 0..n {
        let l = LAB_BASE_L + LAB_DEPTH_GAIN * s[2 * n + p];
        let a = LAB_STRAIN_GAIN * s[n + p];
        let b = LAB_STRAIN_GAIN * s[p];
        let rgb = lab_to_srgb(l, a, b);
        for (c, v) in rgb.iter().enumerate() {
            img.data[c * n + p] = *v;
        }
    }
    img
}
