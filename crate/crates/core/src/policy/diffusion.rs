//! DDPM head over action sequences: a 1-D temporal conv net conditioned on
//! observation features and the step index through FiLM layers.
//!
//! The reverse update is written as `A^{k-1} = α_k (A^k − γ_k ε_θ + N(0, σ_k²))`
//! with a linear β schedule, so that
//! `α_k = 1/√(1−β_k)`, `γ_k = β_k/√(1−ᾱ_k)` and `σ_k = √β̃_k · √(1−β_k)`, where
//! `β̃_k = β_k (1−ᾱ_{k−1})/(1−ᾱ_k)` is the usual posterior variance. Then
//! `α_k σ_k = √β̃_k` and the step is exactly the DDPM posterior sample.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    action_toward, cache_features, gather_rows, relative_chunk, sample_index, ActionScale, ObsEncoder, ObsRef, Policy,
    TrainReport,
};
use crate::data::{Observation, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::math::{randn, rng_from_seed, AdamConfig, AdamState, Rng, Tape, Tensor, Var};
use crate::sim::Action;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const TIME_EMBED_DIM: usize = 16;

/// Per-step coefficients, indexed by `k = 0..K`; sampling runs `k = K−1` down to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Training-schedule step each entry corresponds to (the identity for a
    /// training schedule); fed to the step embedding.
    pub timesteps: Vec<usize>,
}

impl NoiseSchedule {
    /// Linear-β schedule with `k_steps` steps. A single step uses `β = BETA_START`.
    pub fn linear(k_steps: usize) -> Result<Self> {
        if k_steps == 0 {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..k_steps)
            .map(|k| {
                if k_steps == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * k as f64 / (k_steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas, (0..k_steps).collect()))
    }

    fn from_betas(betas: Vec<f64>, timesteps: Vec<usize>) -> Self {
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let mut alpha = Vec::with_capacity(betas.len());
        let mut gamma = Vec::with_capacity(betas.len());
        let mut sigma = Vec::with_capacity(betas.len());
        for (k, &b) in betas.iter().enumerate() {
            alpha.push(1.0 / (1.0 - b).sqrt());
            gamma.push(b / (1.0 - alpha_bar[k]).sqrt());
            let s = if k == 0 {
                0.0
            } else {
                let tilde = b * (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k]);
                (tilde * (1.0 - b)).sqrt()
            };
            sigma.push(s);
        }
        NoiseSchedule { betas, alpha_bar, alpha, gamma, sigma, timesteps }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `m` evenly spaced steps of this schedule, endpoints included, with β
    /// recomputed so the cumulative products agree at the kept steps.
    pub fn subsample(&self, m: usize) -> Result<Self> {
        let k = self.len();
        if m == 0 || m > k {
            return Err(Error::Config(format!("cannot subsample {m} steps from a {k}-step schedule")));
        }
        let idx: Vec<usize> = if m == 1 {
            vec![0]
        } else {
            (0..m).map(|i| ((i * (k - 1)) as f64 / (m - 1) as f64).round() as usize).collect()
        };
        let mut betas = Vec::with_capacity(m);
        let mut prev = 1.0;
        for &i in &idx {
            betas.push(1.0 - self.alpha_bar[i] / prev);
            prev = self.alpha_bar[i];
        }
        Ok(Self::from_betas(betas, idx.iter().map(|&i| self.timesteps[i]).collect()))
    }

    /// `√ᾱ_k · x + √(1−ᾱ_k) · ε`.
    pub fn noised(&self, k: usize, x: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        if k >= self.len() {
            return Err(Error::Config(format!("diffusion step {k} out of range 0..{}", self.len())));
        }
        if x.len() != eps.len() {
            return Err(Error::ShapeMismatch { op: "add_noise", lhs: vec![x.len()], rhs: vec![eps.len()] });
        }
        let (a, s) = (self.alpha_bar[k].sqrt(), (1.0 - self.alpha_bar[k]).sqrt());
        Ok(x.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// One reverse step `α_k (a − γ_k ε̂ + σ_k z)` in place.
    pub fn denoise_step(&self, k: usize, a: &mut [f64], eps_hat: &[f64], z: &[f64]) {
        let (al, g, s) = (self.alpha[k], self.gamma[k], self.sigma[k]);
        for ((x, e), z) in a.iter_mut().zip(eps_hat).zip(z) {
            *x = al * (*x - g * e + s * z);
        }
    }
}

/// Returns the noised sample and the injected noise.
pub fn add_noise(x: &[f64], k: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let eps: Vec<f64> = (0..x.len()).map(|_| randn(rng)).collect();
    Ok((schedule.noised(k, x, &eps)?, eps))
}

/// Runs every reverse step from `init`, asking `eps_fn(a, step)` for the noise
/// estimate, where `step` is the training-schedule index.
pub fn sample_with<F>(schedule: &NoiseSchedule, init: Vec<f64>, mut eps_fn: F, rng: &mut Rng) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let mut a = init;
    let mut z = vec![0.0; a.len()];
    for k in (0..schedule.len()).rev() {
        let eps = eps_fn(&a, schedule.timesteps[k])?;
        if eps.len() != a.len() {
            return Err(Error::ShapeMismatch { op: "denoise", lhs: vec![a.len()], rhs: vec![eps.len()] });
        }
        if schedule.sigma[k] > 0.0 {
            z.iter_mut().for_each(|v| *v = randn(rng));
        } else {
            z.iter_mut().for_each(|v| *v = 0.0);
        }
        schedule.denoise_step(k, &mut a, &eps, &z);
    }
    Ok(a)
}

/// Sinusoidal embedding of a step index.
pub fn step_embedding(k: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (k as f64 * f).sin();
        out[half + i] = (k as f64 * f).cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub k_train: usize,
    pub k_infer: usize,
    pub pred_horizon: usize,
    pub exec_horizon: usize,
    pub obs_horizon: usize,
    pub channels: usize,
    /// Hidden conv layers after the input layer.
    pub layers: usize,
    pub kernel: usize,
    pub cond_hidden: usize,
    pub pos_scale_mm: f64,
    pub batch_size: usize,
    pub head_epochs: usize,
    pub head_lr: f64,
    pub finetune_steps: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            k_train: 100,
            k_infer: 10,
            pred_horizon: 20,
            exec_horizon: 8,
            obs_horizon: 1,
            channels: 32,
            layers: 2,
            kernel: 5,
            cond_hidden: 128,
            pos_scale_mm: 30.0,
            batch_size: 64,
            head_epochs: 200,
            head_lr: 2e-3,
            finetune_steps: 0,
            finetune_batch: 32,
            finetune_lr: 3e-4,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_infer == 0 || self.k_infer > self.k_train {
            return Err(Error::Config(format!("k_infer {} must be in 1..={}", self.k_infer, self.k_train)));
        }
        if self.exec_horizon == 0 || self.exec_horizon > self.pred_horizon {
            return Err(Error::Config(format!(
                "exec_horizon {} must be in 1..={}",
                self.exec_horizon, self.pred_horizon
            )));
        }
        if self.obs_horizon != 1 {
            return Err(Error::Config("only obs_horizon = 1 is supported".into()));
        }
        if self.channels == 0 || self.kernel.is_multiple_of(2) || self.cond_hidden == 0 {
            return Err(Error::Config("channels and cond_hidden must be positive and kernel odd".into()));
        }
        if !(self.pos_scale_mm > 0.0) || self.batch_size == 0 || self.finetune_batch == 0 {
            return Err(Error::Config("pos_scale_mm and batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Noise-prediction network `ε_θ(features, A^k, k)` over `[B, action_dim, horizon]`.
const COND_PARAMS: usize = 4;

#[derive(Debug, Clone)]
pub struct NoisePredictionNet {
    /// two cond fc layers; then per conv layer: conv w, conv b, scale w, scale b, shift w, shift b;
    /// then output conv w, b. Layers after the first are residual.
    params: Vec<Tensor>,
    pub action_dim: usize,
    pub horizon: usize,
    pub feat_dim: usize,
    film_layers: usize,
    pad: usize,
}

impl NoisePredictionNet {
    pub fn new(
        prefix: &str,
        feat_dim: usize,
        action_dim: usize,
        horizon: usize,
        cfg: &DiffusionConfig,
        rng: &mut Rng,
    ) -> Self {
        let (c, k, ch) = (cfg.channels, cfg.kernel, cfg.cond_hidden);
        let cond_in = feat_dim + TIME_EMBED_DIM;
        let mut params = vec![
            Tensor::param_randn(format!("{prefix}.cond.w"), &[cond_in, ch], cond_in, rng),
            Tensor::param_zeros(format!("{prefix}.cond.b"), &[ch]),
            Tensor::param_randn(format!("{prefix}.cond2.w"), &[ch, ch], ch, rng),
            Tensor::param_zeros(format!("{prefix}.cond2.b"), &[ch]),
        ];
        let film_layers = cfg.layers + 1;
        for l in 0..film_layers {
            let cin = if l == 0 { action_dim } else { c };
            params.push(Tensor::param_randn(format!("{prefix}.conv{l}.w"), &[c, cin, k], cin * k, rng));
            params.push(Tensor::param_zeros(format!("{prefix}.conv{l}.b"), &[c]));
            for kind in ["scale", "shift"] {
                let w = Tensor::param_randn(format!("{prefix}.film{l}.{kind}.w"), &[ch, c], ch, rng);
                let small = w.data().iter().map(|v| v * 0.1).collect();
                params.push(Tensor::param(w.name().to_string(), &[ch, c], small).expect("finite"));
                params.push(Tensor::param_zeros(format!("{prefix}.film{l}.{kind}.b"), &[c]));
            }
        }
        params.push(Tensor::param_randn(format!("{prefix}.out.w"), &[action_dim, c, k], c * k, rng));
        params.push(Tensor::param_zeros(format!("{prefix}.out.b"), &[action_dim]));
        NoisePredictionNet { params, action_dim, horizon, feat_dim, film_layers, pad: k / 2 }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.params.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }

    pub fn sample_len(&self) -> usize {
        self.action_dim * self.horizon
    }

    /// Sets every FiLM scale and shift generator to zero.
    pub fn zero_film(&mut self) {
        for l in 0..self.film_layers {
            for j in 2..6 {
                self.params[COND_PARAMS + 6 * l + j].data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// `x`: `[B, action_dim, horizon]`; `feat`: `[B, feat_dim]`; `temb`: `[B, 16]`.
    pub fn forward_with(&self, tape: &mut Tape, p: &[&Tensor], x: Var, feat: Var, temb: Var) -> Result<Var> {
        let cond = tape.concat(&[feat, temb])?;
        let (w, b) = (tape.param(p[0]), tape.param(p[1]));
        let cond = tape.linear(cond, w, b)?;
        let cond = tape.relu(cond)?;
        let (w, b) = (tape.param(p[2]), tape.param(p[3]));
        let cond = tape.linear(cond, w, b)?;
        let cond = tape.relu(cond)?;
        let mut h = x;
        for l in 0..self.film_layers {
            let o = COND_PARAMS + 6 * l;
            let (w, b) = (tape.param(p[o]), tape.param(p[o + 1]));
            let conv = tape.conv1d(h, w, b, self.pad)?;
            let (w, b) = (tape.param(p[o + 2]), tape.param(p[o + 3]));
            let scale = tape.linear(cond, w, b)?;
            let (w, b) = (tape.param(p[o + 4]), tape.param(p[o + 5]));
            let shift = tape.linear(cond, w, b)?;
            let y = tape.scale_shift(conv, scale, shift)?;
            let y = tape.relu(y)?;
            h = if l == 0 { y } else { tape.add(y, h)? };
        }
        let o = COND_PARAMS + 6 * self.film_layers;
        let (w, b) = (tape.param(p[o]), tape.param(p[o + 1]));
        tape.conv1d(h, w, b, self.pad)
    }

    /// Noise estimate for one sample at training step `k`, without gradients.
    pub fn predict(&self, feat: &[f64], a: &[f64], k: usize) -> Result<Vec<f64>> {
        if feat.len() != self.feat_dim || a.len() != self.sample_len() {
            return Err(Error::ShapeMismatch {
                op: "noise_net",
                lhs: vec![self.feat_dim, self.sample_len()],
                rhs: vec![feat.len(), a.len()],
            });
        }
        let mut tape = Tape::inference();
        let x = tape.constant(&[1, self.action_dim, self.horizon], a.to_vec())?;
        let f = tape.constant(&[1, self.feat_dim], feat.to_vec())?;
        let t = tape.constant(&[1, TIME_EMBED_DIM], step_embedding(k).to_vec())?;
        let p = self.params();
        let out = self.forward_with(&mut tape, &p, x, f, t)?;
        Ok(tape.value(out).to_vec())
    }
}

/// Noised inputs, injected noise and step embeddings for a batch of clean samples.
pub struct NoisedBatch {
    pub noised: Vec<f64>,
    pub eps: Vec<f64>,
    pub temb: Vec<f64>,
}

pub fn noise_batch(clean: &[f64], sample_len: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<NoisedBatch> {
    let rows = clean.len() / sample_len;
    let mut out = NoisedBatch {
        noised: Vec::with_capacity(clean.len()),
        eps: Vec::with_capacity(clean.len()),
        temb: Vec::with_capacity(rows * TIME_EMBED_DIM),
    };
    for x in clean.chunks(sample_len) {
        let k = rng.random_range(0..schedule.len());
        let (n, e) = add_noise(x, k, schedule, rng)?;
        out.noised.extend(n);
        out.eps.extend(e);
        out.temb.extend(step_embedding(schedule.timesteps[k]));
    }
    Ok(out)
}

/// MSE between injected and predicted noise for a batch of clean samples laid
/// out as `[B, action_dim, horizon]`, with one uniformly drawn step per sample.
pub fn diffusion_loss(
    tape: &mut Tape,
    net: &NoisePredictionNet,
    p: &[&Tensor],
    feat: Var,
    clean: &[f64],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var> {
    let rows = tape.shape(feat)[0];
    if clean.len() != rows * net.sample_len() {
        return Err(Error::ShapeMismatch {
            op: "diffusion_loss",
            lhs: vec![rows, net.action_dim, net.horizon],
            rhs: vec![clean.len()],
        });
    }
    let b = noise_batch(clean, net.sample_len(), schedule, rng)?;
    let x = tape.constant(&[rows, net.action_dim, net.horizon], b.noised)?;
    let t = tape.constant(&[rows, TIME_EMBED_DIM], b.temb)?;
    let eps = tape.constant(&[rows, net.action_dim, net.horizon], b.eps)?;
    let pred = net.forward_with(tape, p, x, feat, t)?;
    tape.mse(pred, eps)
}

/// Draws `A^K ~ N(0, I)` and denoises it with the given schedule.
pub fn sample_actions(net: &NoisePredictionNet, feat: &[f64], schedule: &NoiseSchedule, rng: &mut Rng) -> Result<Vec<f64>> {
    let init: Vec<f64> = (0..net.sample_len()).map(|_| randn(rng)).collect();
    sample_with(schedule, init, |a, k| net.predict(feat, a, k), rng)
}

/// Chunk of relative goals in the `[4, horizon]` layout the net works in.
fn chunk_channels(record: &TrajectoryRecord, t: usize, h: usize, scale: &ActionScale) -> Vec<f64> {
    let rel = relative_chunk(record, t, h);
    let mut out = vec![0.0; 4 * h];
    for (j, d) in rel.into_iter().enumerate() {
        for (c, v) in scale.normalize(d).into_iter().enumerate() {
            out[c * h + j] = v;
        }
    }
    out
}

pub struct DiffusionPolicy {
    pub encoder: ObsEncoder,
    pub net: NoisePredictionNet,
    pub config: DiffusionConfig,
    pub scale: ActionScale,
    pub infer_schedule: NoiseSchedule,
    queue: VecDeque<[f64; 4]>,
    rng: Rng,
    replans: usize,
}

impl DiffusionPolicy {
    pub fn new(encoder: ObsEncoder, net: NoisePredictionNet, config: DiffusionConfig) -> Result<Self> {
        config.validate()?;
        let infer_schedule = NoiseSchedule::linear(config.k_train)?.subsample(config.k_infer)?;
        let scale = ActionScale::new(config.pos_scale_mm, &encoder.env);
        Ok(DiffusionPolicy { encoder, net, config, scale, infer_schedule, queue: VecDeque::new(), rng: rng_from_seed(0), replans: 0 })
    }

    /// Chunks sampled since the last reset.
    pub fn replans(&self) -> usize {
        self.replans
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.net.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.net.params_mut());
        p
    }
}

impl Policy for DiffusionPolicy {
    fn reset(&mut self, seed: u64) {
        self.queue.clear();
        self.rng = rng_from_seed(seed);
        self.replans = 0;
    }

    fn act(&mut self, obs: &Observation) -> Result<Action> {
        if self.queue.is_empty() {
            let feat = self.encoder.features(&[ObsRef::from(obs)])?;
            let a = sample_actions(&self.net, &feat, &self.infer_schedule, &mut self.rng)?;
            let h = self.net.horizon;
            let p = obs.robot;
            for j in 0..self.config.exec_horizon {
                let d = self.scale.denormalize(&[a[j], a[h + j], a[2 * h + j], a[3 * h + j]]);
                self.queue.push_back([p.x + d[0], p.y + d[1], p.z + d[2], d[3]]);
            }
            self.replans += 1;
        }
        let goal = self.queue.pop_front().expect("queue refilled above");
        Ok(action_toward(&obs.robot, goal))
    }
}

/// Same two-stage scheme as the CVAE head: the net on cached features, then
/// end-to-end steps through the encoders.
pub fn train_diffusion(
    records: &[TrajectoryRecord],
    encoder: ObsEncoder,
    cfg: &DiffusionConfig,
    rng: &mut Rng,
) -> Result<(DiffusionPolicy, TrainReport)> {
    cfg.validate()?;
    if records.is_empty() || records.iter().any(|r| r.is_empty()) {
        return Err(Error::Config("training needs non-empty trajectories".into()));
    }
    let schedule = NoiseSchedule::linear(cfg.k_train)?;
    let feat_dim = encoder.feature_dim();
    let net = NoisePredictionNet::new("diffusion", feat_dim, 4, cfg.pred_horizon, cfg, rng);
    let mut policy = DiffusionPolicy::new(encoder, net, cfg.clone())?;
    let index = sample_index(records);
    let out = 4 * cfg.pred_horizon;
    let targets: Vec<f64> =
        index.iter().flat_map(|&(i, t)| chunk_channels(&records[i], t, cfg.pred_horizon, &policy.scale)).collect();
    let mut report = TrainReport::default();

    if cfg.head_epochs > 0 {
        let feats = cache_features(&policy.encoder, records, &index)?;
        let mut opt = AdamState::new(AdamConfig { lr: cfg.head_lr, ..AdamConfig::default() });
        let mut order: Vec<usize> = (0..index.len()).collect();
        for epoch in 0..cfg.head_epochs {
            // cosine decay to zero over the head stage
            let progress = epoch as f64 / cfg.head_epochs as f64;
            opt.config.lr = cfg.head_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            order.shuffle(rng);
            let mut sum = 0.0;
            let mut batches = 0;
            for rows in order.chunks(cfg.batch_size) {
                let mut tape = Tape::new();
                let f = tape.constant(&[rows.len(), feat_dim], gather_rows(&feats, feat_dim, rows))?;
                let p = policy.net.params();
                let loss = diffusion_loss(&mut tape, &policy.net, &p, f, &gather_rows(&targets, out, rows), &schedule, rng)?;
                let grads = tape.backward(loss)?;
                policy.net.params_mut().into_iter().for_each(|p| p.zero_grad());
                grads.accumulate_into(policy.net.params_mut())?;
                opt.step(&mut policy.net.params_mut())?;
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
            let clean = gather_rows(&targets, out, rows);
            let loss = diffusion_loss(&mut tape, &policy.net, &all[n_enc..], f, &clean, &schedule, rng)?;
            let grads = tape.backward(loss)?;
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

/// Noise-prediction loss on `records` with steps and noise drawn from `seed`.
pub fn validation_loss(policy: &DiffusionPolicy, records: &[TrajectoryRecord], seed: u64) -> Result<f64> {
    let index = sample_index(records);
    if index.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let schedule = NoiseSchedule::linear(policy.config.k_train)?;
    let h = policy.config.pred_horizon;
    let feats = cache_features(&policy.encoder, records, &index)?;
    let fd = policy.encoder.feature_dim();
    let mut rng = rng_from_seed(seed);
    let p = policy.net.params();
    let mut total = 0.0;
    for rows in (0..index.len()).collect::<Vec<_>>().chunks(64) {
        let clean: Vec<f64> = rows.iter().flat_map(|&r| chunk_channels(&records[index[r].0], index[r].1, h, &policy.scale)).collect();
        let mut tape = Tape::inference();
        let f = tape.constant(&[rows.len(), fd], gather_rows(&feats, fd, rows))?;
        let loss = diffusion_loss(&mut tape, &policy.net, &p, f, &clean, &schedule, &mut rng)?;
        total += tape.item(loss) * rows.len() as f64;
    }
    Ok(total / index.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::grad_check_params;

    #[test]
    fn schedule_shape() {
        let s = NoiseSchedule::linear(100).unwrap();
        assert_eq!(s.sigma[0], 0.0);
        assert!(s.sigma.iter().all(|&v| v >= 0.0));
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        let one = NoiseSchedule::linear(1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.sigma[0], 0.0);
        assert!(NoiseSchedule::linear(0).is_err());
        let sub = s.subsample(10).unwrap();
        assert_eq!(sub.timesteps.first(), Some(&0));
        assert_eq!(sub.timesteps.last(), Some(&99));
        assert!((sub.alpha_bar[9] - s.alpha_bar[99]).abs() < 1e-15);
        assert!((sub.alpha_bar[0] - s.alpha_bar[0]).abs() < 1e-15);
    }

    #[test]
    fn posterior_equivalence() {
        // α(a − γε + σz) against the textbook posterior mean and std.
        let s = NoiseSchedule::linear(50).unwrap();
        for k in 1..50 {
            let b = s.betas[k];
            let mean_coef = 1.0 / (1.0 - b).sqrt();
            let eps_coef = b / ((1.0 - b).sqrt() * (1.0 - s.alpha_bar[k]).sqrt());
            let post_std = (b * (1.0 - s.alpha_bar[k - 1]) / (1.0 - s.alpha_bar[k])).sqrt();
            assert!((s.alpha[k] - mean_coef).abs() < 1e-14);
            assert!((s.alpha[k] * s.gamma[k] - eps_coef).abs() < 1e-14);
            assert!((s.alpha[k] * s.sigma[k] - post_std).abs() < 1e-14);
        }
    }

    #[test]
    fn film_zero_ignores_features() {
        let mut rng = rng_from_seed(3);
        let cfg = DiffusionConfig { channels: 6, layers: 1, cond_hidden: 8, ..DiffusionConfig::default() };
        let mut net = NoisePredictionNet::new("n", 5, 4, 6, &cfg, &mut rng);
        let a: Vec<f64> = (0..24).map(|i| (i as f64 * 0.3).sin()).collect();
        let f1 = vec![0.1, -0.4, 0.9, 0.0, 2.0];
        let f2 = vec![-1.0, 0.5, 0.2, 3.0, -0.7];
        assert_ne!(net.predict(&f1, &a, 7).unwrap(), net.predict(&f2, &a, 7).unwrap());
        net.zero_film();
        assert_eq!(net.predict(&f1, &a, 7).unwrap(), net.predict(&f2, &a, 7).unwrap());
        assert_eq!(net.predict(&f1, &a, 7).unwrap().len(), 24);
    }

    #[test]
    fn noised_at_step_zero_is_close() {
        let s = NoiseSchedule::linear(100).unwrap();
        let x = vec![1.0; 8];
        let zero = s.noised(0, &x, &[0.0; 8]).unwrap();
        assert!(zero.iter().all(|&v| v == s.alpha_bar[0].sqrt()));
        assert!(s.noised(100, &x, &[0.0; 8]).is_err());
    }

    #[test]
    fn noise_variance_matches_schedule() {
        let s = NoiseSchedule::linear(100).unwrap();
        let mut rng = rng_from_seed(12);
        let k = 60;
        let draws: Vec<f64> = (0..10_000).map(|_| add_noise(&[0.5], k, &s, &mut rng).unwrap().0[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((var / (1.0 - s.alpha_bar[k]) - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn zero_net_loss_is_noise_power() {
        let mut rng = rng_from_seed(4);
        let cfg = DiffusionConfig { channels: 4, layers: 1, cond_hidden: 6, ..DiffusionConfig::default() };
        let mut net = NoisePredictionNet::new("n", 3, 4, 8, &cfg, &mut rng);
        net.params_mut().into_iter().for_each(|p| p.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let s = NoiseSchedule::linear(100).unwrap();
        let rows = 256;
        let clean: Vec<f64> = (0..rows * 32).map(|i| (i as f64 * 0.01).cos()).collect();
        let mut tape = Tape::inference();
        let feat = tape.constant(&[rows, 3], vec![0.3; rows * 3]).unwrap();
        let p = net.params();
        let l = diffusion_loss(&mut tape, &net, &p, feat, &clean, &s, &mut rng).unwrap();
        assert!((tape.item(l) - 1.0).abs() < 0.05, "{}", tape.item(l));
    }

    #[test]
    fn film_path_passes_grad_check() {
        let mut rng = rng_from_seed(8);
        let cfg = DiffusionConfig { channels: 3, layers: 1, cond_hidden: 4, kernel: 3, ..DiffusionConfig::default() };
        let mut net = NoisePredictionNet::new("n", 2, 4, 4, &cfg, &mut rng);
        let s = NoiseSchedule::linear(10).unwrap();
        let clean: Vec<f64> = (0..2 * 16).map(|_| randn(&mut rng)).collect();
        let feat: Vec<f64> = (0..4).map(|_| randn(&mut rng)).collect();
        let template = net.clone();
        let err = grad_check_params(
            |tape, p| {
                let f = tape.constant(&[2, 2], feat.clone())?;
                diffusion_loss(tape, &template, p, f, &clean, &s, &mut rng_from_seed(1))
            },
            &mut net.params_mut(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
