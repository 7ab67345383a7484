//! Imitation policies over encoded observations: an action-chunking CVAE head
//! and a diffusion head, plus the pieces they share.

pub mod act;
pub mod diffusion;

use serde::{Deserialize, Serialize};

use crate::data::{Observation, TrajectoryRecord};
use crate::encoders::{normalize_position, TactileEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::math::{Tape, Tensor, Var};
use crate::sim::{Action, EnvConfig, Image, RobotState, WorldState};
use crate::tactile::StrainMap;

/// Which sensors feed the policy. Proprioception is always included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Tactile,
    #[serde(alias = "vision+tactile")]
    VisionTactile,
}

impl Modality {
    pub fn uses_vision(self) -> bool {
        matches!(self, Modality::Vision | Modality::VisionTactile)
    }

    pub fn uses_tactile(self) -> bool {
        matches!(self, Modality::Tactile | Modality::VisionTactile)
    }

    pub fn label(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Tactile => "tactile",
            Modality::VisionTactile => "vision_tactile",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vision" => Ok(Modality::Vision),
            "tactile" => Ok(Modality::Tactile),
            "vision_tactile" | "vision+tactile" => Ok(Modality::VisionTactile),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Borrowed view of one observation.
#[derive(Debug, Clone, Copy)]
pub struct ObsRef<'a> {
    pub images: &'a [Image],
    pub strain: &'a StrainMap,
    pub robot: RobotState,
}

impl<'a> From<&'a Observation> for ObsRef<'a> {
    fn from(o: &'a Observation) -> Self {
        ObsRef { images: &o.images, strain: &o.tactile.strain, robot: o.robot }
    }
}

impl TrajectoryRecord {
    pub fn obs_ref(&self, t: usize) -> ObsRef<'_> {
        ObsRef { images: &self.images[t], strain: &self.tactile[t].strain, robot: self.states[t] }
    }
}

/// Turns observations into the flat feature vector the heads condition on:
/// per-camera vision embeddings, the tactile embedding when used, and the
/// normalised robot state.
#[derive(Debug, Clone)]
pub struct ObsEncoder {
    pub modality: Modality,
    /// One shared encoder, or one per camera.
    pub vision: Vec<VisionEncoder>,
    pub tactile: Option<TactileEncoder>,
    pub cameras: usize,
    pub env: EnvConfig,
}

impl ObsEncoder {
    pub fn new(
        modality: Modality,
        vision: Vec<VisionEncoder>,
        tactile: Option<TactileEncoder>,
        cameras: usize,
        env: EnvConfig,
    ) -> Result<Self> {
        if modality.uses_vision() && !(vision.len() == 1 || vision.len() == cameras) {
            return Err(Error::Config(format!("{} vision encoders for {cameras} cameras", vision.len())));
        }
        if modality.uses_tactile() && tactile.is_none() {
            return Err(Error::Config("tactile modality needs a tactile encoder".into()));
        }
        let vision = if modality.uses_vision() { vision } else { Vec::new() };
        let tactile = if modality.uses_tactile() { tactile } else { None };
        Ok(ObsEncoder { modality, vision, tactile, cameras, env })
    }

    pub fn embed_dim(&self) -> usize {
        self.vision.first().map(|v| v.embed_dim()).or(self.tactile.as_ref().map(|t| t.embed_dim())).unwrap_or(0)
    }

    pub fn feature_dim(&self) -> usize {
        let d = self.embed_dim();
        let mut f = 4;
        if self.modality.uses_vision() {
            f += self.cameras * d;
        }
        if self.modality.uses_tactile() {
            f += d;
        }
        f
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.vision.iter().flat_map(|v| v.params()).collect();
        if let Some(t) = &self.tactile {
            p.extend(t.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.vision.iter_mut().flat_map(|v| v.params_mut()).collect();
        if let Some(t) = &mut self.tactile {
            p.extend(t.params_mut());
        }
        p
    }

    /// `[B, feature_dim]` features for a batch, with weights from `params`
    /// ordered as [`Self::params`].
    pub fn forward_with(&self, tape: &mut Tape, params: &[&Tensor], batch: &[ObsRef<'_>]) -> Result<Var> {
        let b = batch.len();
        let mut parts = Vec::with_capacity(3);
        let mut off = 0;
        if self.modality.uses_vision() {
            for o in batch {
                if o.images.len() != self.cameras {
                    return Err(Error::InvalidShape {
                        op: "observation",
                        detail: format!("expected {} camera images, got {}", self.cameras, o.images.len()),
                    });
                }
            }
            if self.vision.len() == 1 {
                let enc = &self.vision[0];
                let imgs: Vec<&Image> = batch.iter().flat_map(|o| o.images.iter()).collect();
                let x = enc.images_leaf(tape, &imgs)?;
                let e = enc.forward_with(tape, &params[..8], x)?;
                parts.push(tape.reshape(e, &[b, self.cameras * enc.embed_dim()])?);
                off = 8;
            } else {
                for (c, enc) in self.vision.iter().enumerate() {
                    let imgs: Vec<&Image> = batch.iter().map(|o| &o.images[c]).collect();
                    let x = enc.images_leaf(tape, &imgs)?;
                    parts.push(enc.forward_with(tape, &params[off..off + 8], x)?);
                    off += 8;
                }
            }
        }
        let pos: Vec<[f64; 4]> = batch.iter().map(|o| normalize_position(&o.robot, &self.env)).collect();
        let p = TactileEncoder::position_leaf(tape, &pos)?;
        if let Some(enc) = &self.tactile {
            let maps: Vec<&StrainMap> = batch.iter().map(|o| o.strain).collect();
            let s = enc.strain_leaf(tape, &maps)?;
            parts.push(enc.forward_with(tape, &params[off..off + 8], s, p)?);
        }
        parts.push(p);
        tape.concat(&parts)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &[ObsRef<'_>]) -> Result<Var> {
        let params = self.params();
        self.forward_with(tape, &params, batch)
    }

    /// Features as plain rows, without gradient tracking.
    pub fn features(&self, batch: &[ObsRef<'_>]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let f = self.forward(&mut tape, batch)?;
        Ok(tape.value(f).to_vec())
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.params_mut().into_iter().for_each(|p| p.set_requires_grad(flag));
    }
}

/// Maps relative goals to the normalised units the heads are trained in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionScale {
    /// Millimetres per unit of positional delta.
    pub pos_mm: f64,
    pub width_max: f64,
}

impl ActionScale {
    pub fn new(pos_mm: f64, env: &EnvConfig) -> Self {
        ActionScale { pos_mm, width_max: env.width_max }
    }

    pub fn normalize(&self, delta: [f64; 4]) -> [f64; 4] {
        [delta[0] / self.pos_mm, delta[1] / self.pos_mm, delta[2] / self.pos_mm, delta[3] / self.width_max]
    }

    pub fn denormalize(&self, v: &[f64]) -> [f64; 4] {
        [v[0] * self.pos_mm, v[1] * self.pos_mm, v[2] * self.pos_mm, v[3] * self.width_max]
    }
}

/// Goals `t .. t+h` relative to the position at `t` (width absolute),
/// padding past the end with the final goal.
pub fn relative_chunk(record: &TrajectoryRecord, t: usize, h: usize) -> Vec<[f64; 4]> {
    let p = record.states[t];
    let last = record.len() - 1;
    (0..h)
        .map(|j| {
            let g = record.goals[(t + j).min(last)];
            [g[0] - p.x, g[1] - p.y, g[2] - p.z, g[3]]
        })
        .collect()
}

/// Relative goals predicted at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub t0: usize,
    /// `(Δx, Δy, Δz)` in mm relative to the position at `t0`, absolute width in mm.
    pub deltas: Vec<[f64; 4]>,
}

impl ActionChunk {
    /// Global-frame goals given the position the chunk was predicted from.
    pub fn goals(&self, origin: &RobotState) -> Vec<[f64; 4]> {
        self.deltas.iter().map(|d| [origin.x + d[0], origin.y + d[1], origin.z + d[2], d[3]]).collect()
    }
}

/// Action that moves from `robot` toward the global `goal`.
pub fn action_toward(robot: &RobotState, goal: [f64; 4]) -> Action {
    Action::new(goal[0] - robot.x, goal[1] - robot.y, goal[2] - robot.z, goal[3])
}

/// Closed-loop controller evaluated inside an episode.
pub trait Policy {
    /// Clears per-episode state. Stochastic policies reseed from `seed`.
    fn reset(&mut self, seed: u64);
    fn act(&mut self, obs: &Observation) -> Result<Action>;

    /// Entry point used by the evaluator. Learned policies see only `obs`;
    /// privileged controllers such as the scripted expert may also read the
    /// world state.
    fn act_in(&mut self, obs: &Observation, _world: &WorldState) -> Result<Action> {
        self.act(obs)
    }
}

/// Loss curves from supervised training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per frozen-encoder epoch.
    pub head_losses: Vec<f64>,
    /// Loss per end-to-end step.
    pub finetune_losses: Vec<f64>,
    /// Mean |μ| of the latent on the last training batch (CVAE head only).
    pub final_latent_mean_abs: f64,
}

/// Training/validation samples: `(trajectory, timestep)` pairs.
pub fn sample_index(records: &[TrajectoryRecord]) -> Vec<(usize, usize)> {
    records.iter().enumerate().flat_map(|(i, r)| (0..r.len()).map(move |t| (i, t))).collect()
}

/// Writes `src` row `i` into consecutive rows of a new buffer, one per index.
pub(crate) fn gather_rows(src: &[f64], width: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

/// Computes features for all samples in batches, without gradients.
pub(crate) fn cache_features(enc: &ObsEncoder, records: &[TrajectoryRecord], index: &[(usize, usize)]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(index.len() * enc.feature_dim());
    for chunk in index.chunks(64) {
        let batch: Vec<ObsRef<'_>> = chunk.iter().map(|&(i, t)| records[i].obs_ref(t)).collect();
        out.extend(enc.features(&batch)?);
    }
    Ok(out)
}
