//! Action-chunking CVAE head with zero-latent inference and exponentially
//! weighted temporal ensembling of overlapping chunks.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    action_toward, cache_features, gather_rows, relative_chunk, sample_index, ActionChunk, ActionScale, ObsEncoder, ObsRef,
    Policy, TrainReport,
};
use crate::data::{Observation, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::math::{randn, AdamConfig, AdamState, Rng, Tape, Tensor, Var};
use crate::sim::Action;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActConfig {
    pub chunk_h: usize,
    pub kl_weight: f64,
    pub ensemble_k: f64,
    pub latent_dim: usize,
    pub hidden: usize,
    pub style_hidden: usize,
    /// Millimetres per unit of predicted positional delta.
    pub pos_scale_mm: f64,
    pub batch_size: usize,
    /// Epochs over cached features with the encoders frozen.
    pub head_epochs: usize,
    pub head_lr: f64,
    /// End-to-end steps with the encoders trainable.
    pub finetune_steps: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
}

impl Default for ActConfig {
    fn default() -> Self {
        ActConfig {
            chunk_h: 20,
            kl_weight: 10.0,
            ensemble_k: 0.25,
            latent_dim: 8,
            hidden: 128,
            style_hidden: 64,
            pos_scale_mm: 30.0,
            batch_size: 64,
            head_epochs: 150,
            head_lr: 1e-3,
            finetune_steps: 150,
            finetune_batch: 32,
            finetune_lr: 3e-4,
        }
    }
}

impl ActConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_h == 0 || self.latent_dim == 0 || self.hidden == 0 || self.style_hidden == 0 {
            return Err(Error::Config("chunk_h, latent_dim and layer sizes must be positive".into()));
        }
        if !(self.ensemble_k >= 0.0) || !(self.kl_weight >= 0.0) {
            return Err(Error::Config("ensemble_k and kl_weight must be non-negative".into()));
        }
        if !(self.pos_scale_mm > 0.0) || self.batch_size == 0 || self.finetune_batch == 0 {
            return Err(Error::Config("pos_scale_mm and batch sizes must be positive".into()));
        }
        Ok(())
    }
}

fn lin(prefix: &str, name: &str, i: usize, o: usize, rng: &mut Rng) -> [Tensor; 2] {
    [Tensor::param_randn(format!("{prefix}.{name}.w"), &[i, o], i, rng), Tensor::param_zeros(format!("{prefix}.{name}.b"), &[o])]
}

/// Style encoder `(features, chunk) → (μ, log σ²)` and decoder `(features, z) → chunk`.
#[derive(Debug, Clone)]
pub struct ChunkPredictor {
    /// style: fc, mu, logvar; decoder: fc1, fc2, out. Weight then bias for each.
    params: Vec<Tensor>,
    feat_dim: usize,
    chunk_h: usize,
    latent_dim: usize,
}

const STYLE: usize = 0;
const DECODER: usize = 6;

impl ChunkPredictor {
    pub fn new(prefix: &str, feat_dim: usize, cfg: &ActConfig, rng: &mut Rng) -> Self {
        let out = cfg.chunk_h * 4;
        let mut params = Vec::with_capacity(12);
        params.extend(lin(prefix, "style.fc", feat_dim + out, cfg.style_hidden, rng));
        params.extend(lin(prefix, "style.mu", cfg.style_hidden, cfg.latent_dim, rng));
        params.extend(lin(prefix, "style.logvar", cfg.style_hidden, cfg.latent_dim, rng));
        params.extend(lin(prefix, "dec.fc1", feat_dim + cfg.latent_dim, cfg.hidden, rng));
        params.extend(lin(prefix, "dec.fc2", cfg.hidden, cfg.hidden, rng));
        let [w, b] = lin(prefix, "dec.out", cfg.hidden, out, rng);
        // start near the zero chunk
        let w = Tensor::param(w.name().to_string(), w.shape(), w.data().iter().map(|v| v * 0.1).collect()).expect("finite");
        params.extend([w, b]);
        ChunkPredictor { params, feat_dim, chunk_h: cfg.chunk_h, latent_dim: cfg.latent_dim }
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn chunk_h(&self) -> usize {
        self.chunk_h
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.params.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }

    /// `(μ, log σ²)`, each `[B, latent]`.
    pub fn style_with(&self, tape: &mut Tape, p: &[&Tensor], feat: Var, chunk: Var) -> Result<(Var, Var)> {
        let x = tape.concat(&[feat, chunk])?;
        let (w, b) = (tape.param(p[STYLE]), tape.param(p[STYLE + 1]));
        let h = tape.linear(x, w, b)?;
        let h = tape.relu(h)?;
        let (w, b) = (tape.param(p[STYLE + 2]), tape.param(p[STYLE + 3]));
        let mu = tape.linear(h, w, b)?;
        let (w, b) = (tape.param(p[STYLE + 4]), tape.param(p[STYLE + 5]));
        let lv = tape.linear(h, w, b)?;
        Ok((mu, lv))
    }

    /// `[B, chunk_h·4]` normalised relative goals.
    pub fn decode_with(&self, tape: &mut Tape, p: &[&Tensor], feat: Var, z: Var) -> Result<Var> {
        let x = tape.concat(&[feat, z])?;
        let mut h = x;
        for layer in 0..2 {
            let (w, b) = (tape.param(p[DECODER + 2 * layer]), tape.param(p[DECODER + 2 * layer + 1]));
            h = tape.linear(h, w, b)?;
            h = tape.relu(h)?;
        }
        let (w, b) = (tape.param(p[DECODER + 4]), tape.param(p[DECODER + 5]));
        tape.linear(h, w, b)
    }

    /// Decoder output at `z = 0` for a batch of feature rows.
    pub fn decode_zero(&self, feat: &[f64]) -> Result<Vec<f64>> {
        let rows = feat.len() / self.feat_dim;
        let mut tape = Tape::inference();
        let f = tape.constant(&[rows, self.feat_dim], feat.to_vec())?;
        let z = tape.constant(&[rows, self.latent_dim], vec![0.0; rows * self.latent_dim])?;
        let p = self.params();
        let out = self.decode_with(&mut tape, &p, f, z)?;
        Ok(tape.value(out).to_vec())
    }
}

/// Reconstruction MSE plus `beta` times the KL divergence of `N(μ, σ²)` from
/// the unit Gaussian, summed over latent dimensions and averaged over the batch.
pub fn act_loss(tape: &mut Tape, pred: Var, target: Var, mu: Var, logvar: Var, beta: f64) -> Result<Var> {
    let recon = tape.mse(pred, target)?;
    let (sm, sl) = (tape.shape(mu).to_vec(), tape.shape(logvar).to_vec());
    if sm != sl || sm.len() != 2 {
        return Err(Error::ShapeMismatch { op: "act_loss", lhs: sm, rhs: sl });
    }
    let (b, l) = (sm[0], sm[1]);
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar)?;
    let s = tape.add(mu2, var)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.sum(s)?;
    let s = tape.scale(s, 0.5 / b as f64)?;
    let offset = tape.constant(&[1], vec![-0.5 * l as f64])?;
    let kl = tape.add(s, offset)?;
    let kl = tape.scale(kl, beta)?;
    tape.add(recon, kl)
}

/// Normalised weights `e^{-k·age}` for chunks of the given ages.
pub fn ensemble_weights(ages: &[usize], k: f64) -> Vec<f64> {
    let raw: Vec<f64> = ages.iter().map(|&a| (-k * a as f64).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Recent chunks, stored as global-frame goals.
#[derive(Debug, Clone, Default)]
pub struct EnsembleBuffer {
    horizon: usize,
    chunks: VecDeque<(usize, Vec<[f64; 4]>)>,
}

impl EnsembleBuffer {
    pub fn new(horizon: usize) -> Self {
        EnsembleBuffer { horizon, chunks: VecDeque::with_capacity(horizon) }
    }

    pub fn clear(&mut self) {
        self.chunks.clear();
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Adds goals predicted at `t0` and drops chunks that no longer reach `t0`.
    pub fn push(&mut self, t0: usize, goals: Vec<[f64; 4]>) {
        self.chunks.retain(|(s, g)| s + g.len() > t0);
        while self.chunks.len() >= self.horizon.max(1) {
            self.chunks.pop_front();
        }
        self.chunks.push_back((t0, goals));
    }

    /// Weighted goal for timestep `t` over every chunk covering it; the chunk
    /// predicted `i` steps ago weighs `e^{-k·i}`.
    pub fn ensemble(&self, t: usize, k: f64) -> Result<[f64; 4]> {
        let live: Vec<(usize, [f64; 4])> =
            self.chunks.iter().filter(|(s, g)| *s <= t && t < s + g.len()).map(|(s, g)| (t - s, g[t - s])).collect();
        if live.is_empty() {
            return Err(Error::Config(format!("no chunk covers timestep {t}; predict before ensembling")));
        }
        let ages: Vec<usize> = live.iter().map(|(a, _)| *a).collect();
        let w = ensemble_weights(&ages, k);
        let base = live[0].1;
        let mut out = base;
        for ((_, g), wi) in live.iter().zip(&w).skip(1) {
            for d in 0..4 {
                out[d] += wi * (g[d] - base[d]);
            }
        }
        Ok(out)
    }
}

/// Decoder output at `z = 0`, converted to millimetre deltas.
pub fn predict_chunk(model: &ChunkPredictor, features: &[f64], scale: &ActionScale, t0: usize) -> Result<ActionChunk> {
    if features.len() != model.feat_dim() {
        return Err(Error::ShapeMismatch { op: "predict_chunk", lhs: vec![model.feat_dim()], rhs: vec![features.len()] });
    }
    let out = model.decode_zero(features)?;
    Ok(ActionChunk { t0, deltas: out.chunks(4).map(|c| scale.denormalize(c)).collect() })
}

pub struct ActPolicy {
    pub encoder: ObsEncoder,
    pub model: ChunkPredictor,
    pub config: ActConfig,
    pub scale: ActionScale,
    buffer: EnsembleBuffer,
    t: usize,
}

impl ActPolicy {
    pub fn new(encoder: ObsEncoder, model: ChunkPredictor, config: ActConfig) -> Self {
        let scale = ActionScale::new(config.pos_scale_mm, &encoder.env);
        let buffer = EnsembleBuffer::new(config.chunk_h);
        ActPolicy { encoder, model, config, scale, buffer, t: 0 }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.model.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.model.params_mut());
        p
    }
}

impl Policy for ActPolicy {
    fn reset(&mut self, _seed: u64) {
        self.buffer.clear();
        self.t = 0;
    }

    fn act(&mut self, obs: &Observation) -> Result<Action> {
        let feat = self.encoder.features(&[ObsRef::from(obs)])?;
        let chunk = predict_chunk(&self.model, &feat, &self.scale, self.t)?;
        self.buffer.push(self.t, chunk.goals(&obs.robot));
        let goal = self.buffer.ensemble(self.t, self.config.ensemble_k)?;
        self.t += 1;
        Ok(action_toward(&obs.robot, goal))
    }
}

fn chunk_targets(records: &[TrajectoryRecord], index: &[(usize, usize)], h: usize, scale: &ActionScale) -> Vec<f64> {
    let mut out = Vec::with_capacity(index.len() * h * 4);
    for &(i, t) in index {
        for d in relative_chunk(&records[i], t, h) {
            out.extend(scale.normalize(d));
        }
    }
    out
}

fn noise_leaf(tape: &mut Tape, rows: usize, dim: usize, rng: &mut Rng) -> Result<Var> {
    tape.constant(&[rows, dim], (0..rows * dim).map(|_| randn(rng)).collect())
}

/// One CVAE step's loss given features already on the tape.
fn cvae_loss(
    tape: &mut Tape,
    model: &ChunkPredictor,
    p: &[&Tensor],
    feat: Var,
    target: Var,
    beta: f64,
    rng: &mut Rng,
) -> Result<(Var, Var)> {
    let rows = tape.shape(feat)[0];
    let (mu, lv) = model.style_with(tape, p, feat, target)?;
    let eps = noise_leaf(tape, rows, model.latent_dim(), rng)?;
    let half = tape.scale(lv, 0.5)?;
    let std = tape.exp(half)?;
    let noise = tape.mul(std, eps)?;
    let z = tape.add(mu, noise)?;
    let pred = model.decode_with(tape, p, feat, z)?;
    Ok((act_loss(tape, pred, target, mu, lv, beta)?, mu))
}

/// Supervised training: first the head on cached features from frozen
/// encoders, then a fixed number of end-to-end steps.
pub fn train_act(records: &[TrajectoryRecord], encoder: ObsEncoder, cfg: &ActConfig, rng: &mut Rng) -> Result<(ActPolicy, TrainReport)> {
    cfg.validate()?;
    if records.is_empty() || records.iter().any(|r| r.is_empty()) {
        return Err(Error::Config("training needs non-empty trajectories".into()));
    }
    let feat_dim = encoder.feature_dim();
    let model = ChunkPredictor::new("act", feat_dim, cfg, rng);
    let mut policy = ActPolicy::new(encoder, model, cfg.clone());
    let index = sample_index(records);
    let out = cfg.chunk_h * 4;
    let targets = chunk_targets(records, &index, cfg.chunk_h, &policy.scale);
    let mut report = TrainReport::default();

    if cfg.head_epochs > 0 {
        let feats = cache_features(&policy.encoder, records, &index)?;
        let mut opt = AdamState::new(AdamConfig { lr: cfg.head_lr, ..AdamConfig::default() });
        let mut order: Vec<usize> = (0..index.len()).collect();
        for _ in 0..cfg.head_epochs {
            order.shuffle(rng);
            let mut sum = 0.0;
            let mut batches = 0;
            for rows in order.chunks(cfg.batch_size) {
                let mut tape = Tape::new();
                let f = tape.constant(&[rows.len(), feat_dim], gather_rows(&feats, feat_dim, rows))?;
                let y = tape.constant(&[rows.len(), out], gather_rows(&targets, out, rows))?;
                let p = policy.model.params();
                let (loss, mu) = cvae_loss(&mut tape, &policy.model, &p, f, y, cfg.kl_weight, rng)?;
                let grads = tape.backward(loss)?;
                report.final_latent_mean_abs = mean_abs(tape.value(mu));
                policy.model.params_mut().into_iter().for_each(|p| p.zero_grad());
                grads.accumulate_into(policy.model.params_mut())?;
                opt.step(&mut policy.model.params_mut())?;
                sum += tape.item(loss);
                batches += 1;
            }
            report.head_losses.push(sum / batches as f64);
        }
    }

    if cfg.finetune_steps > 0 {
        let mut opt = AdamState::new(AdamConfig { lr: cfg.finetune_lr, ..AdamConfig::default() });
        let mut order: Vec<usize> = (0..index.len()).collect();
        let mut cursor = order.len();
        for _ in 0..cfg.finetune_steps {
            if cursor + cfg.finetune_batch > order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let rows = &order[cursor..(cursor + cfg.finetune_batch).min(order.len())];
            cursor += cfg.finetune_batch;
            let batch: Vec<ObsRef<'_>> = rows.iter().map(|&r| records[index[r].0].obs_ref(index[r].1)).collect();
            let mut tape = Tape::new();
            let all = policy.params();
            let n_enc = policy.encoder.params().len();
            let f = policy.encoder.forward_with(&mut tape, &all[..n_enc], &batch)?;
            let y = tape.constant(&[rows.len(), out], gather_rows(&targets, out, rows))?;
            let (loss, mu) = cvae_loss(&mut tape, &policy.model, &all[n_enc..], f, y, cfg.kl_weight, rng)?;
            let grads = tape.backward(loss)?;
            report.final_latent_mean_abs = mean_abs(tape.value(mu));
            drop(all);
            policy.params_mut().into_iter().for_each(|p| p.zero_grad());
            grads.accumulate_into(policy.params_mut())?;
            opt.step(&mut policy.params_mut())?;
            report.finetune_losses.push(tape.item(loss));
        }
    }
    policy.params_mut().into_iter().for_each(|p| p.clear_grad());
    Ok((policy, report))
}

/// Chunk MSE at `z = 0` in normalised units, averaged over every timestep of `records`.
pub fn validation_mse(policy: &ActPolicy, records: &[TrajectoryRecord]) -> Result<f64> {
    let index = sample_index(records);
    if index.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let h = policy.config.chunk_h;
    let targets = chunk_targets(records, &index, h, &policy.scale);
    let feats = cache_features(&policy.encoder, records, &index)?;
    let pred = policy.model.decode_zero(&feats)?;
    Ok(pred.iter().zip(&targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / targets.len() as f64)
}

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len().max(1) as f64
}
