//! Temporally constrained, per-camera, symmetric contrastive pretraining of
//! the vision and tactile encoders.

use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::PairedSource;
use crate::encoders::{TactileEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::math::{rng_from_seed, AdamConfig, AdamState, Rng, Tape, Tensor, Var};
use crate::sim::Image;
use crate::tactile::StrainMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Samples drawn from one trajectory per contrastive batch.
    pub n: usize,
    /// Minimum separation between sampled timesteps.
    pub dt_min: usize,
    pub tau: f64,
    pub epochs: usize,
    /// Trajectories averaged per optimizer step.
    pub batch_trajectories: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { n: 7, dt_min: 10, tau: 0.07, epochs: 20, batch_trajectories: 4, adam: AdamConfig::default() }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("n must be at least 2, got {}", self.n)));
        }
        if self.dt_min < 1 {
            return Err(Error::Config("dt_min must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_trajectories == 0 {
            return Err(Error::Config("batch_trajectories must be at least 1".into()));
        }
        Ok(())
    }
}

/// Shortest trajectory from which `n` samples `dt_min` apart can be drawn.
pub fn min_trajectory_len(n: usize, dt_min: usize) -> usize {
    (n - 1) * dt_min + 1
}

/// Draws `n` sorted timesteps in `[0, traj_len)` with consecutive gaps of at
/// least `dt_min`, uniformly over all such sets.
///
/// Removing the mandatory `dt_min - 1` slack after each of the first `n - 1`
/// picks maps valid sets one-to-one onto plain `n`-subsets of a shorter range,
/// so a uniform subset there gives a uniform valid set here.
pub fn sample_timesteps(traj_len: usize, n: usize, dt_min: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let dt = dt_min.max(1);
    let need = min_trajectory_len(n, dt);
    if traj_len < need {
        return Err(Error::Infeasible(format!(
            "trajectory of length {traj_len} cannot hold {n} samples {dt} apart (needs at least {need})"
        )));
    }
    let range = traj_len - (n - 1) * (dt - 1);
    let mut picks = index::sample(rng, range, n).into_vec();
    picks.sort_unstable();
    Ok(picks.iter().enumerate().map(|(i, &z)| z + i * (dt - 1)).collect())
}

const NORM_TOL: f64 = 1e-6;

fn check_normalized(set: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = set.first().map_or(0, |v| v.len());
    for (i, v) in set.iter().enumerate() {
        if v.len() != d {
            return Err(Error::ShapeMismatch { op: "similarity_matrix", lhs: vec![d], rhs: vec![v.len()] });
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Config(format!("{what} embedding {i} is not normalised (norm {norm})")));
        }
    }
    Ok(d)
}

/// `n×n` row-major matrix of dot products between unit tactile (rows) and vision (columns) embeddings.
pub fn similarity_matrix(tactile: &[Vec<f64>], vision: &[Vec<f64>]) -> Result<Vec<f64>> {
    if tactile.len() != vision.len() {
        return Err(Error::ShapeMismatch { op: "similarity_matrix", lhs: vec![tactile.len()], rhs: vec![vision.len()] });
    }
    let dt = check_normalized(tactile, "tactile")?;
    let dv = check_normalized(vision, "vision")?;
    if dt != dv {
        return Err(Error::ShapeMismatch { op: "similarity_matrix", lhs: vec![dt], rhs: vec![dv] });
    }
    Ok(tactile
        .iter()
        .flat_map(|t| vision.iter().map(move |v| t.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()))
        .collect())
}

/// Differentiable similarity of unit embeddings `tactile[n,D]` and `vision[n,D]`.
pub fn similarity_var(tape: &mut Tape, tactile: Var, vision: Var) -> Result<Var> {
    let vt = tape.transpose(vision)?;
    tape.matmul(tactile, vt)
}

/// Symmetric cross-entropy pulling each diagonal entry up against its row and
/// its column, halved, summed over cameras.
pub fn clip_loss(tape: &mut Tape, sims: &[Var], tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let mut total: Option<Var> = None;
    for &s in sims {
        let shape = tape.shape(s).to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::InvalidShape { op: "clip_loss", detail: format!("similarity must be square, got {shape:?}") });
        }
        let n = shape[0];
        if n < 2 {
            return Err(Error::InvalidShape { op: "clip_loss", detail: format!("need at least 2 samples, got {n}") });
        }
        let targets: Vec<usize> = (0..n).collect();
        let logits = tape.scale(s, 1.0 / tau)?;
        let rows = tape.log_softmax_cross_entropy(logits, &targets)?;
        let lt = tape.transpose(logits)?;
        let cols = tape.log_softmax_cross_entropy(lt, &targets)?;
        let both = tape.add(rows, cols)?;
        let cam = tape.scale(both, 0.5)?;
        total = Some(match total {
            Some(t) => tape.add(t, cam)?,
            None => cam,
        });
    }
    total.ok_or_else(|| Error::InvalidShape { op: "clip_loss", detail: "no cameras".into() })
}

/// [`clip_loss`] evaluated on plain `n×n` matrices.
pub fn clip_loss_value(sims: &[Vec<f64>], n: usize, tau: f64) -> Result<f64> {
    let mut tape = Tape::inference();
    let vars = sims.iter().map(|s| tape.constant(&[n, n], s.clone())).collect::<Result<Vec<_>>>()?;
    let l = clip_loss(&mut tape, &vars, tau)?;
    Ok(tape.item(l))
}

/// Fraction of rows whose largest entry sits on the diagonal.
pub fn retrieval_top1(sim: &[f64], n: usize) -> f64 {
    let hits = (0..n)
        .filter(|&i| {
            let row = &sim[i * n..(i + 1) * n];
            (0..n).all(|j| j == i || row[j] < row[i])
        })
        .count();
    hits as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub retrieval_top1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub curve: Vec<LossRecord>,
    /// Trajectories too short for the sampling constraint.
    pub skipped: usize,
}

pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss,retrieval_top1")?;
    for r in curve {
        writeln!(f, "{},{:.9},{:.6}", r.step, r.loss, r.retrieval_top1)?;
    }
    f.flush()?;
    Ok(())
}

/// Contrastive batch for one trajectory: the chosen timesteps.
fn gather<'a, S: PairedSource>(
    src: &'a S,
    trajs: &[(usize, Vec<usize>)],
) -> (Vec<&'a StrainMap>, Vec<[f64; 4]>, Vec<&'a Image>) {
    let cams = src.num_cameras();
    let mut strain = Vec::new();
    let mut pos = Vec::new();
    let mut imgs = Vec::new();
    for (traj, ts) in trajs {
        for &t in ts {
            strain.push(src.strain(*traj, t));
            pos.push(src.position(*traj, t));
        }
        // camera-major within a trajectory so each camera's rows are contiguous
        for c in 0..cams {
            for &t in ts {
                imgs.push(src.image(*traj, t, c));
            }
        }
    }
    (strain, pos, imgs)
}

/// Loss and mean retrieval for a set of sampled trajectories, built on `tape`
/// with weights taken from `vp` and `tp`.
#[allow(clippy::too_many_arguments)]
fn batch_loss<S: PairedSource>(
    tape: &mut Tape,
    src: &S,
    vision: &VisionEncoder,
    tactile: &TactileEncoder,
    vp: &[&Tensor],
    tp: &[&Tensor],
    trajs: &[(usize, Vec<usize>)],
    n: usize,
    tau: f64,
) -> Result<(Var, f64)> {
    let cams = src.num_cameras();
    let (strain, pos, imgs) = gather(src, trajs);
    let s = tactile.strain_leaf(tape, &strain)?;
    let p = TactileEncoder::position_leaf(tape, &pos)?;
    let te = tactile.forward_with(tape, tp, s, p)?;
    let x = vision.images_leaf(tape, &imgs)?;
    let ve = vision.forward_with(tape, vp, x)?;

    let mut total: Option<Var> = None;
    let mut retrieval = 0.0;
    for (k, _) in trajs.iter().enumerate() {
        let tk = tape.slice_rows(te, k * n, n)?;
        let mut sims = Vec::with_capacity(cams);
        for c in 0..cams {
            let vk = tape.slice_rows(ve, (k * cams + c) * n, n)?;
            let sim = similarity_var(tape, tk, vk)?;
            retrieval += retrieval_top1(tape.value(sim), n);
            sims.push(sim);
        }
        let l = clip_loss(tape, &sims, tau)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty contrastive batch".into()))?;
    let mean = tape.scale(total, 1.0 / trajs.len() as f64)?;
    Ok((mean, retrieval / (trajs.len() * cams) as f64))
}

fn feasible<S: PairedSource>(src: &S, need: usize) -> (Vec<usize>, usize) {
    let ok: Vec<usize> = (0..src.num_trajectories()).filter(|&i| src.trajectory_len(i) >= need).collect();
    let skipped = src.num_trajectories() - ok.len();
    (ok, skipped)
}

/// Trains both encoders in place and returns the per-step loss curve.
/// One optimizer step averages the loss over `batch_trajectories` trajectories.
pub fn pretrain<S: PairedSource>(
    src: &S,
    vision: &mut VisionEncoder,
    tactile: &mut TactileEncoder,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainReport> {
    pretrain_steps(src, vision, tactile, cfg, None, rng)
}

/// As [`pretrain`], stopping after `max_steps` optimizer steps if given.
pub fn pretrain_steps<S: PairedSource>(
    src: &S,
    vision: &mut VisionEncoder,
    tactile: &mut TactileEncoder,
    cfg: &PretrainConfig,
    max_steps: Option<usize>,
    rng: &mut Rng,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if src.num_trajectories() == 0 {
        return Err(Error::Config("pretraining needs at least one trajectory".into()));
    }
    if src.num_cameras() == 0 {
        return Err(Error::Config("pretraining needs at least one camera".into()));
    }
    let need = min_trajectory_len(cfg.n, cfg.dt_min);
    let (usable, skipped) = feasible(src, need);
    if skipped > 0 {
        log::warn!("skipping {skipped} trajectories shorter than {need} steps");
    }
    if usable.is_empty() {
        return Err(Error::Infeasible(format!("no trajectory reaches the {need}-step minimum")));
    }
    let mut report = PretrainReport { curve: Vec::new(), skipped };
    let mut vopt = AdamState::new(cfg.adam);
    let mut topt = AdamState::new(cfg.adam);
    let limit = max_steps.unwrap_or(usize::MAX);
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        let mut order = usable.clone();
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_trajectories) {
            if step >= limit {
                break 'epochs;
            }
            let mut trajs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                trajs.push((i, sample_timesteps(src.trajectory_len(i), cfg.n, cfg.dt_min, rng)?));
            }
            let (loss, retrieval) = {
                let mut tape = Tape::new();
                let (vp, tp) = (vision.params(), tactile.params());
                let (l, r) = batch_loss(&mut tape, src, vision, tactile, &vp, &tp, &trajs, cfg.n, cfg.tau)?;
                let grads = tape.backward(l)?;
                drop((vp, tp));
                vision.params_mut().into_iter().for_each(|p| p.zero_grad());
                tactile.params_mut().into_iter().for_each(|p| p.zero_grad());
                grads.accumulate_into(vision.params_mut())?;
                grads.accumulate_into(tactile.params_mut())?;
                (tape.item(l), r)
            };
            vopt.step(&mut vision.params_mut())?;
            topt.step(&mut tactile.params_mut())?;
            report.curve.push(LossRecord { step, loss, retrieval_top1: retrieval });
            step += 1;
        }
    }
    Ok(report)
}

/// Mean in-batch retrieval over `batches` freshly sampled single-trajectory batches.
pub fn evaluate_retrieval<S: PairedSource>(
    src: &S,
    vision: &VisionEncoder,
    tactile: &TactileEncoder,
    cfg: &PretrainConfig,
    batches: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let need = min_trajectory_len(cfg.n, cfg.dt_min);
    let (usable, _) = feasible(src, need);
    if usable.is_empty() {
        return Err(Error::Infeasible(format!("no trajectory reaches the {need}-step minimum")));
    }
    let mut total = 0.0;
    for _ in 0..batches {
        let i = usable[rng.random_range(0..usable.len())];
        let ts = sample_timesteps(src.trajectory_len(i), cfg.n, cfg.dt_min, rng)?;
        let mut tape = Tape::inference();
        let (vp, tp) = (vision.params(), tactile.params());
        let (_, r) = batch_loss(&mut tape, src, vision, tactile, &vp, &tp, &[(i, ts)], cfg.n, cfg.tau)?;
        total += r;
    }
    Ok(total / batches.max(1) as f64)
}

/// Toy paired data: every view is a fixed function of a hidden 2-D latent
/// that drifts smoothly along each trajectory.
#[derive(Debug, Clone)]
pub struct SyntheticPairs {
    images: Vec<Vec<Vec<Image>>>,
    strain: Vec<Vec<StrainMap>>,
    positions: Vec<Vec<[f64; 4]>>,
    cameras: usize,
}

fn blob(h: usize, w: usize, cu: f64, cv: f64, sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let v = r as f64 / (h - 1) as f64;
        for c in 0..w {
            let u = c as f64 / (w - 1) as f64;
            out[r * w + c] = (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    out
}

impl SyntheticPairs {
    pub fn generate(trajectories: usize, len: usize, cameras: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let (ih, iw, sh, sw) = (32, 32, 24, 32);
        let mut images = Vec::with_capacity(trajectories);
        let mut strain = Vec::with_capacity(trajectories);
        let mut positions = Vec::with_capacity(trajectories);
        for _ in 0..trajectories {
            let (w1, w2) = (rng.random_range(0.02..0.06), rng.random_range(0.02..0.06));
            let (p1, p2) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
            let (mut ti, mut ts, mut tp) = (Vec::with_capacity(len), Vec::with_capacity(len), Vec::with_capacity(len));
            for t in 0..len {
                let a = (w1 * t as f64 + p1).sin();
                let b = (w2 * t as f64 + p2).cos();
                let (ua, ub) = (0.5 + 0.4 * a, 0.5 + 0.4 * b);
                let mut views = Vec::with_capacity(cameras);
                for c in 0..cameras {
                    let (cu, cv) = match c % 3 {
                        0 => (ua, ub),
                        1 => (ub, ua),
                        _ => (1.0 - ua, ub),
                    };
                    let field = blob(ih, iw, cu, cv, 0.12);
                    let mut img = Image::filled(3, ih, iw, 0.1);
                    let ch = c % 3;
                    for (i, f) in field.iter().enumerate() {
                        img.data[ch * ih * iw + i] = 0.1 + 0.8 * f;
                    }
                    views.push(img);
                }
                let field = blob(sh, sw, ua, ub, 0.2);
                let n = sh * sw;
                let mut s = vec![0.0; 3 * n];
                for (i, f) in field.iter().enumerate() {
                    s[i] = a * f;
                    s[n + i] = b * f;
                    s[2 * n + i] = *f;
                }
                ti.push(views);
                ts.push(StrainMap { height: sh, width: sw, strain: s, cover_attenuation: 1.0 });
                tp.push([a, b, a * b, 0.0]);
            }
            images.push(ti);
            strain.push(ts);
            positions.push(tp);
        }
        SyntheticPairs { images, strain, positions, cameras }
    }
}

impl PairedSource for SyntheticPairs {
    fn num_trajectories(&self) -> usize {
        self.images.len()
    }

    fn trajectory_len(&self, traj: usize) -> usize {
        self.images[traj].len()
    }

    fn num_cameras(&self) -> usize {
        self.cameras
    }

    fn image(&self, traj: usize, t: usize, camera: usize) -> &Image {
        &self.images[traj][t][camera]
    }

    fn strain(&self, traj: usize, t: usize) -> &StrainMap {
        &self.strain[traj][t]
    }

    fn position(&self, traj: usize, t: usize) -> [f64; 4] {
        self.positions[traj][t]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;

    #[test]
    fn boundary_length_has_one_solution() {
        let mut rng = rng_from_seed(0);
        for _ in 0..5 {
            assert_eq!(sample_timesteps(61, 7, 10, &mut rng).unwrap(), vec![0, 10, 20, 30, 40, 50, 60]);
        }
    }

    #[test]
    fn too_short_states_the_bound() {
        let mut rng = rng_from_seed(0);
        let err = sample_timesteps(60, 7, 10, &mut rng).unwrap_err().to_string();
        assert!(err.contains("61"), "{err}");
    }

    #[test]
    fn samples_respect_gap() {
        let mut rng = rng_from_seed(1);
        for _ in 0..200 {
            let t = sample_timesteps(208, 7, 10, &mut rng).unwrap();
            assert_eq!(t.len(), 7);
            assert!(t.windows(2).all(|w| w[1] - w[0] >= 10));
            assert!(*t.last().unwrap() < 208);
        }
    }

    #[test]
    fn similarity_examples() {
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        let basis = vec![e(0), e(1), e(2)];
        assert_eq!(similarity_matrix(&basis, &basis).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let same = vec![e(1); 3];
        assert!(similarity_matrix(&same, &same).unwrap().iter().all(|&v| v == 1.0));
        assert!(similarity_matrix(&[vec![2.0, 0.0]], &[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn uniform_similarity_gives_ln_n() {
        let n = 7;
        let flat = vec![vec![0.3; n * n]];
        let l = clip_loss_value(&flat, n, 0.07).unwrap();
        assert!((l - (n as f64).ln()).abs() < 1e-9);
        assert!(clip_loss_value(&[vec![0.0]], 1, 0.07).is_err());
    }

    #[test]
    fn zero_epochs_leaves_encoders_untouched() {
        let data = SyntheticPairs::generate(2, 80, 1, 3);
        let mut rng = rng_from_seed(3);
        let mut v = VisionEncoder::new("v", &EncoderConfig::default(), 32, 32, &mut rng).unwrap();
        let mut t = TactileEncoder::new("t", &EncoderConfig::default(), 24, 32, &mut rng).unwrap();
        let (v0, t0) = (v.clone(), t.clone());
        let cfg = PretrainConfig { epochs: 0, ..Default::default() };
        let rep = pretrain(&data, &mut v, &mut t, &cfg, &mut rng).unwrap();
        assert!(rep.curve.is_empty());
        assert!(v.params().iter().zip(v0.params()).all(|(a, b)| a.data() == b.data()));
        assert!(t.params().iter().zip(t0.params()).all(|(a, b)| a.data() == b.data()));
    }
}
