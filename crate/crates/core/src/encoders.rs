//! Vision and tactile encoders mapping observations into one shared embedding space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Rng, Tape, Tensor, Var};
use crate::sim::{EnvConfig, Image, RobotState};
use crate::tactile::StrainMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { embed_dim: 32, conv1_channels: 8, conv2_channels: 16, hidden: 64 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.conv1_channels == 0 || self.conv2_channels == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("encoder sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// An embedding vector read back from a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub v: Vec<f64>,
    pub normalized: bool,
}

/// Workspace-relative position features in `[-1, 1]`: x, y, z by the
/// workspace box and width by the gripper range.
pub fn normalize_position(robot: &RobotState, env: &EnvConfig) -> [f64; 4] {
    let (lo, hi) = (env.workspace_min, env.workspace_max);
    let n = |v: f64, a: f64, b: f64| 2.0 * (v - a) / (b - a) - 1.0;
    [
        n(robot.x, lo[0], hi[0]),
        n(robot.y, lo[1], hi[1]),
        n(robot.z, lo[2], hi[2]),
        n(robot.width, 0.0, env.width_max),
    ]
}

fn conv_out(n: usize) -> usize {
    // kernel 3, stride 2, pad 1
    (n + 2 - 3) / 2 + 1
}

const KERNEL: usize = 3;

/// Two strided conv layers with relu, flattened.
#[derive(Debug, Clone)]
struct ConvTrunk {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    in_shape: [usize; 3],
    features: usize,
}

impl ConvTrunk {
    fn new(prefix: &str, cfg: &EncoderConfig, in_shape: [usize; 3], rng: &mut Rng) -> Self {
        let [c, h, w] = in_shape;
        let (c1, c2) = (cfg.conv1_channels, cfg.conv2_channels);
        let features = c2 * conv_out(conv_out(h)) * conv_out(conv_out(w));
        ConvTrunk {
            w1: Tensor::param_randn(format!("{prefix}.conv1.w"), &[c1, c, KERNEL, KERNEL], c * KERNEL * KERNEL, rng),
            b1: Tensor::param_zeros(format!("{prefix}.conv1.b"), &[c1]),
            w2: Tensor::param_randn(format!("{prefix}.conv2.w"), &[c2, c1, KERNEL, KERNEL], c1 * KERNEL * KERNEL, rng),
            b2: Tensor::param_zeros(format!("{prefix}.conv2.b"), &[c2]),
            in_shape,
            features,
        }
    }

    fn forward(&self, tape: &mut Tape, p: &[&Tensor], x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1..] != self.in_shape {
            return Err(Error::InvalidShape {
                op: "encoder",
                detail: format!("expected [B, {}, {}, {}], got {s:?}", self.in_shape[0], self.in_shape[1], self.in_shape[2]),
            });
        }
        let (w1, b1, w2, b2) = (tape.param(p[0]), tape.param(p[1]), tape.param(p[2]), tape.param(p[3]));
        let h = tape.conv2d(x, w1, b1, 2, 1)?;
        let h = tape.relu(h)?;
        let h = tape.conv2d(h, w2, b2, 2, 1)?;
        let h = tape.relu(h)?;
        tape.flatten(h)
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn renamed(&self, prefix: &str) -> Self {
        ConvTrunk {
            w1: self.w1.renamed(format!("{prefix}.conv1.w")),
            b1: self.b1.renamed(format!("{prefix}.conv1.b")),
            w2: self.w2.renamed(format!("{prefix}.conv2.w")),
            b2: self.b2.renamed(format!("{prefix}.conv2.b")),
            ..self.clone()
        }
    }
}

/// Hidden relu layer then a linear projection to the embedding.
#[derive(Debug, Clone)]
struct Head {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Head {
    fn new(prefix: &str, input: usize, hidden: usize, out: usize, rng: &mut Rng) -> Self {
        Head {
            w1: Tensor::param_randn(format!("{prefix}.fc1.w"), &[input, hidden], input, rng),
            b1: Tensor::param_zeros(format!("{prefix}.fc1.b"), &[hidden]),
            w2: Tensor::param_randn(format!("{prefix}.fc2.w"), &[hidden, out], hidden, rng),
            b2: Tensor::param_zeros(format!("{prefix}.fc2.b"), &[out]),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn renamed(&self, prefix: &str) -> Self {
        Head {
            w1: self.w1.renamed(format!("{prefix}.fc1.w")),
            b1: self.b1.renamed(format!("{prefix}.fc1.b")),
            w2: self.w2.renamed(format!("{prefix}.fc2.w")),
            b2: self.b2.renamed(format!("{prefix}.fc2.b")),
        }
    }
}

fn head_forward(tape: &mut Tape, p: &[&Tensor], x: Var) -> Result<Var> {
    let (w1, b1, w2, b2) = (tape.param(p[0]), tape.param(p[1]), tape.param(p[2]), tape.param(p[3]));
    let h = tape.linear(x, w1, b1)?;
    let h = tape.relu(h)?;
    tape.linear(h, w2, b2)
}

fn embeddings_from(tape: &Tape, v: Var) -> Vec<Embedding> {
    let d = tape.shape(v)[1];
    tape.value(v).chunks(d).map(|c| Embedding { v: c.to_vec(), normalized: true }).collect()
}

/// Image encoder; one parameter set serves every camera.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    trunk: ConvTrunk,
    head: Head,
    embed_dim: usize,
}

impl VisionEncoder {
    pub fn new(prefix: &str, cfg: &EncoderConfig, height: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let trunk = ConvTrunk::new(&format!("{prefix}.trunk"), cfg, [3, height, width], rng);
        let head = Head::new(&format!("{prefix}.head"), trunk.features, cfg.hidden, cfg.embed_dim, rng);
        Ok(VisionEncoder { trunk, head, embed_dim: cfg.embed_dim })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.trunk.in_shape
    }

    /// `images[B,3,H,W]` → unit-norm `[B,D]`.
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        self.forward_with(tape, &self.params(), images)
    }

    /// Forward pass reading weights from `params`, ordered as [`Self::params`].
    pub fn forward_with(&self, tape: &mut Tape, params: &[&Tensor], images: Var) -> Result<Var> {
        let f = self.trunk.forward(tape, &params[..4], images)?;
        let e = head_forward(tape, &params[4..8], f)?;
        tape.l2_normalize(e)
    }

    /// Stacks images into one batch leaf on the tape.
    pub fn images_leaf(&self, tape: &mut Tape, images: &[&Image]) -> Result<Var> {
        let [c, h, w] = self.trunk.in_shape;
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.shape() != [c, h, w] {
                return Err(Error::InvalidShape { op: "encode_vision", detail: format!("expected {:?}, got {:?}", [c, h, w], img.shape()) });
            }
            data.extend_from_slice(&img.data);
        }
        tape.constant(&[images.len(), c, h, w], data)
    }

    pub fn encode(&self, images: &[&Image]) -> Result<Vec<Embedding>> {
        let mut tape = Tape::inference();
        let x = self.images_leaf(&mut tape, images)?;
        let e = self.forward(&mut tape, x)?;
        Ok(embeddings_from(&tape, e))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.trunk.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.trunk.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    /// Identical weights under a new parameter-name prefix.
    pub fn renamed(&self, prefix: &str) -> Self {
        VisionEncoder {
            trunk: self.trunk.renamed(&format!("{prefix}.trunk")),
            head: self.head.renamed(&format!("{prefix}.head")),
            embed_dim: self.embed_dim,
        }
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.params_mut().into_iter().for_each(|p| p.set_requires_grad(flag));
    }
}

/// Strain-map encoder whose projection head also sees the normalised robot state.
#[derive(Debug, Clone)]
pub struct TactileEncoder {
    trunk: ConvTrunk,
    head: Head,
    embed_dim: usize,
}

impl TactileEncoder {
    pub fn new(prefix: &str, cfg: &EncoderConfig, height: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let trunk = ConvTrunk::new(&format!("{prefix}.trunk"), cfg, [3, height, width], rng);
        let head = Head::new(&format!("{prefix}.head"), trunk.features + 4, cfg.hidden, cfg.embed_dim, rng);
        Ok(TactileEncoder { trunk, head, embed_dim: cfg.embed_dim })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.trunk.in_shape
    }

    /// `strain[B,3,H,W]`, `pos[B,4]` → unit-norm `[B,D]`.
    pub fn forward(&self, tape: &mut Tape, strain: Var, pos: Var) -> Result<Var> {
        self.forward_with(tape, &self.params(), strain, pos)
    }

    /// Forward pass reading weights from `params`, ordered as [`Self::params`].
    pub fn forward_with(&self, tape: &mut Tape, params: &[&Tensor], strain: Var, pos: Var) -> Result<Var> {
        let f = self.trunk.forward(tape, &params[..4], strain)?;
        let (sf, sp) = (tape.shape(f).to_vec(), tape.shape(pos).to_vec());
        if sp != [sf[0], 4] {
            return Err(Error::ShapeMismatch { op: "encode_tactile(position)", lhs: vec![sf[0], 4], rhs: sp });
        }
        let x = tape.concat(&[f, pos])?;
        let e = head_forward(tape, &params[4..8], x)?;
        tape.l2_normalize(e)
    }

    pub fn strain_leaf(&self, tape: &mut Tape, maps: &[&StrainMap]) -> Result<Var> {
        let [c, h, w] = self.trunk.in_shape;
        let mut data = Vec::with_capacity(maps.len() * c * h * w);
        for m in maps {
            if m.height != h || m.width != w || m.strain.len() != c * h * w {
                return Err(Error::InvalidShape {
                    op: "encode_tactile",
                    detail: format!("expected strain {:?}, got {}x{} with {} values", [c, h, w], m.height, m.width, m.strain.len()),
                });
            }
            data.extend_from_slice(&m.strain);
        }
        tape.constant(&[maps.len(), c, h, w], data)
    }

    pub fn position_leaf(tape: &mut Tape, positions: &[[f64; 4]]) -> Result<Var> {
        if let Some(p) = positions.iter().find(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("position {p:?}")));
        }
        tape.constant(&[positions.len(), 4], positions.iter().flatten().copied().collect())
    }

    /// `positions` are already normalised (see [`normalize_position`]).
    pub fn encode(&self, maps: &[&StrainMap], positions: &[[f64; 4]]) -> Result<Vec<Embedding>> {
        let mut tape = Tape::inference();
        let s = self.strain_leaf(&mut tape, maps)?;
        let p = Self::position_leaf(&mut tape, positions)?;
        let e = self.forward(&mut tape, s, p)?;
        Ok(embeddings_from(&tape, e))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.trunk.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.trunk.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.params_mut().into_iter().for_each(|p| p.set_requires_grad(flag));
    }
}
