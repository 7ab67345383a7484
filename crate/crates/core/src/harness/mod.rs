//! Demonstration collection, evaluation and the modality × pretraining matrix.

pub mod config;
pub mod dataset_io;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use config::{Config, ExperimentConfig, PolicyKind, Seeds};
pub use dataset_io::{read_dataset, write_dataset};

use crate::contrastive::{pretrain, write_loss_csv, PretrainReport};
use crate::data::{goal_of, observe, Demos, Observation, SensorConfig, TrajectoryRecord};
use crate::encoders::{TactileEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::math::{derive_seed, load_checkpoint, randn, rng_from_seed, save_checkpoint, Rng, Tensor};
use crate::policy::act::{self, ActPolicy, ChunkPredictor};
use crate::policy::diffusion::{self, DiffusionPolicy, NoisePredictionNet};
use crate::policy::{Modality, ObsEncoder, Policy, TrainReport};
use crate::sim::{scripted_expert, success, Action, Env, EnvConfig, WorldState};
use crate::tactile::{mean_abs_tangential_strain, render_lab};

/// Scripted expert behind the [`Policy`] interface; it reads the world state.
pub struct ExpertPolicy {
    pub env: EnvConfig,
    pub noise_std: f64,
    rng: Rng,
}

impl ExpertPolicy {
    pub fn new(env: EnvConfig, noise_std: f64) -> Self {
        ExpertPolicy { env, noise_std, rng: rng_from_seed(0) }
    }
}

impl Policy for ExpertPolicy {
    fn reset(&mut self, seed: u64) {
        self.rng = rng_from_seed(seed);
    }

    fn act(&mut self, _obs: &Observation) -> Result<Action> {
        Err(Error::Config("the scripted expert needs the world state".into()))
    }

    fn act_in(&mut self, _obs: &Observation, world: &WorldState) -> Result<Action> {
        Ok(scripted_expert(&self.env, world, self.noise_std, &mut self.rng))
    }
}

/// Runs the scripted expert from `seed` and records every step.
pub fn record_expert_episode(env: &Env, sensors: &SensorConfig, noise_std: f64, seed: u64) -> Result<(TrajectoryRecord, bool)> {
    let mut state = env.reset(seed);
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let mut rec = TrajectoryRecord {
        seed,
        expert_noise_std: noise_std,
        images: Vec::new(),
        tactile: Vec::new(),
        states: Vec::new(),
        goals: Vec::new(),
    };
    loop {
        let obs = observe(env, &state, sensors)?;
        let action = scripted_expert(env.config(), &state, noise_std, &mut rng);
        rec.goals.push(goal_of(env.config(), &obs.robot, &action));
        rec.states.push(obs.robot);
        rec.images.push(obs.images);
        rec.tactile.push(obs.tactile);
        let tr = env.step(&state, &action)?;
        state = tr.state;
        if tr.terminal {
            break;
        }
    }
    Ok((rec, success(&state)))
}

/// `count` successful expert demonstrations. Failed rollouts are discarded and
/// replaced; the run aborts once fewer than half of the attempts could succeed.
pub fn collect_demos(env: &Env, sensors: &SensorConfig, count: usize, noise_std: f64, seed: u64) -> Result<Vec<TrajectoryRecord>> {
    if count == 0 {
        return Err(Error::Config("demo count must be at least 1".into()));
    }
    sensors.validate()?;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0u64;
    while out.len() < count {
        if attempts >= 2 * count as u64 {
            return Err(Error::Infeasible(format!(
                "scripted expert succeeded on only {} of {attempts} rollouts at noise {noise_std} mm",
                out.len()
            )));
        }
        let (rec, ok) = record_expert_episode(env, sensors, noise_std, derive_seed(seed, attempts))?;
        attempts += 1;
        if ok {
            out.push(rec);
        }
    }
    log::info!("collected {count} demonstrations in {attempts} attempts");
    Ok(out)
}

/// Seeded shuffle split into `(train, val)`. Both sides get at least one record.
pub fn split<T: Clone>(records: &[T], train_frac: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train_frac must lie in (0, 1), got {train_frac}")));
    }
    if records.len() < 2 {
        return Err(Error::Config("need at least two records to split".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let n_train = ((records.len() as f64 * train_frac).round() as usize).clamp(1, records.len() - 1);
    let train = order[..n_train].iter().map(|&i| records[i].clone()).collect();
    let val = order[n_train..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub length: usize,
    pub success: bool,
    /// Mean over steps of the mean absolute tangential strain.
    pub mean_strain: f64,
}

/// Runs one episode; executed actions get `N(0, noise_std²)` on x, y and z.
pub fn run_episode(
    policy: &mut dyn Policy,
    env: &Env,
    sensors: &SensorConfig,
    noise_std: f64,
    seed: u64,
) -> Result<(EpisodeRecord, Vec<f64>)> {
    let mut state = env.reset(seed);
    policy.reset(derive_seed(seed, 1));
    let mut noise = rng_from_seed(derive_seed(seed, 2));
    let mut strain = Vec::new();
    loop {
        let obs = observe(env, &state, sensors)?;
        strain.push(mean_abs_tangential_strain(&obs.tactile));
        let a = policy.act_in(&obs, &state)?;
        let executed = Action::new(
            a.dx + noise_std * randn(&mut noise),
            a.dy + noise_std * randn(&mut noise),
            a.dz + noise_std * randn(&mut noise),
            a.width_cmd,
        );
        let tr = env.step(&state, &executed)?;
        state = tr.state;
        if tr.terminal {
            break;
        }
    }
    let mean_strain = strain.iter().sum::<f64>() / strain.len() as f64;
    Ok((EpisodeRecord { seed, length: strain.len(), success: success(&state), mean_strain }, strain))
}

pub fn evaluate(
    policy: &mut dyn Policy,
    env: &Env,
    sensors: &SensorConfig,
    episodes: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    if !(noise_std >= 0.0) {
        return Err(Error::Config(format!("noise std must be non-negative, got {noise_std}")));
    }
    (0..episodes as u64).map(|e| run_episode(policy, env, sensors, noise_std, derive_seed(seed, e)).map(|r| r.0)).collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cell: String,
    pub policy: PolicyKind,
    pub modality: Modality,
    pub pretrained: bool,
    pub success_rate: f64,
    pub successes: usize,
    pub episodes: usize,
    pub lengths: Vec<usize>,
    pub episode_strain: Vec<f64>,
    /// Median over episodes of the per-episode mean strain.
    pub median_strain: f64,
    pub eval_seed: u64,
    pub train_seed: u64,
    pub eval_noise_std_mm: f64,
    pub validation_loss: f64,
    pub training: TrainReport,
    /// Sampler coefficients and fixed design choices, for the record.
    pub metadata: serde_json::Value,
}

impl MetricsReport {
    pub fn from_episodes(cell: &CellSpec, eps: &[EpisodeRecord], eval_seed: u64, train_seed: u64, noise: f64) -> Self {
        let successes = eps.iter().filter(|e| e.success).count();
        let strain: Vec<f64> = eps.iter().map(|e| e.mean_strain).collect();
        MetricsReport {
            cell: cell.name(),
            policy: cell.policy,
            modality: cell.modality,
            pretrained: cell.pretrained,
            success_rate: if eps.is_empty() { 0.0 } else { successes as f64 / eps.len() as f64 },
            successes,
            episodes: eps.len(),
            lengths: eps.iter().map(|e| e.length).collect(),
            median_strain: median(&strain),
            episode_strain: strain,
            eval_seed,
            train_seed,
            eval_noise_std_mm: noise,
            validation_loss: f64::NAN,
            training: TrainReport::default(),
            metadata: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub policy: PolicyKind,
    pub modality: Modality,
    pub pretrained: bool,
}

impl CellSpec {
    pub fn name(&self) -> String {
        format!("{}_{}_{}", self.policy.label(), self.modality.label(), if self.pretrained { "pretrained" } else { "scratch" })
    }

    /// Cells in the configured grid, modality-major.
    pub fn grid(cfg: &ExperimentConfig) -> Vec<CellSpec> {
        cfg.modalities
            .iter()
            .flat_map(|&m| cfg.pretrained.iter().map(move |&p| CellSpec { policy: cfg.policy, modality: m, pretrained: p }))
            .collect()
    }

    /// Training seed: shared by both pretraining states of a modality so the
    /// pair differs only in encoder weights.
    pub fn train_seed(&self, seeds: &Seeds) -> u64 {
        let m = match self.modality {
            Modality::Vision => 0,
            Modality::Tactile => 1,
            Modality::VisionTactile => 2,
        };
        derive_seed(seeds.train, m)
    }
}

/// Encoders at initialisation, from the pretraining seed.
#[derive(Debug, Clone)]
pub struct EncoderPair {
    pub vision: VisionEncoder,
    pub tactile: TactileEncoder,
}

impl EncoderPair {
    pub fn init(cfg: &Config) -> Result<Self> {
        let mut rng = rng_from_seed(cfg.seeds.pretrain);
        let cam = &cfg.sensors.cameras[0];
        let t = &cfg.sensors.tactile;
        Ok(EncoderPair {
            vision: VisionEncoder::new("vision", &cfg.encoder, cam.height, cam.width, &mut rng)?,
            tactile: TactileEncoder::new("tactile", &cfg.encoder, t.height, t.width, &mut rng)?,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.vision.params();
        p.extend(self.tactile.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.vision.params_mut();
        p.extend(self.tactile.params_mut());
        p
    }

    pub fn save(&self, prefix: &Path) -> Result<()> {
        save_checkpoint(prefix, &self.params())
    }

    pub fn load(cfg: &Config, prefix: &Path) -> Result<Self> {
        let mut pair = Self::init(cfg)?;
        load_checkpoint(prefix, &mut pair.params_mut())?;
        Ok(pair)
    }
}

/// Contrastive pretraining of both encoders on `train`.
pub fn pretrain_encoders(cfg: &Config, train: &[TrajectoryRecord]) -> Result<(EncoderPair, PretrainReport)> {
    let mut pair = EncoderPair::init(cfg)?;
    let mut rng = rng_from_seed(derive_seed(cfg.seeds.pretrain, 1));
    let src = Demos { records: train, env: &cfg.env };
    let report = pretrain(&src, &mut pair.vision, &mut pair.tactile, &cfg.pretrain, &mut rng)?;
    Ok((pair, report))
}

/// Observation encoder for a cell: one shared vision encoder for the CVAE head
/// and identically initialised per-camera copies for the diffusion head.
pub fn cell_encoder(cfg: &Config, cell: &CellSpec, encoders: &EncoderPair) -> Result<ObsEncoder> {
    let cameras = cfg.sensors.cameras.len();
    let vision = match cell.policy {
        PolicyKind::Act => vec![encoders.vision.clone()],
        PolicyKind::Diffusion => (0..cameras).map(|c| encoders.vision.renamed(&format!("vision.cam{c}"))).collect(),
    };
    ObsEncoder::new(cell.modality, vision, Some(encoders.tactile.clone()), cameras, cfg.env.clone())
}

/// A trained policy of either head.
pub enum TrainedPolicy {
    Act(ActPolicy),
    Diffusion(DiffusionPolicy),
}

impl TrainedPolicy {
    pub fn as_policy(&mut self) -> &mut dyn Policy {
        match self {
            TrainedPolicy::Act(p) => p,
            TrainedPolicy::Diffusion(p) => p,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            TrainedPolicy::Act(p) => p.params(),
            TrainedPolicy::Diffusion(p) => p.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            TrainedPolicy::Act(p) => p.params_mut(),
            TrainedPolicy::Diffusion(p) => p.params_mut(),
        }
    }

    pub fn validation_loss(&self, val: &[TrajectoryRecord], seed: u64) -> Result<f64> {
        match self {
            TrainedPolicy::Act(p) => act::validation_mse(p, val),
            TrainedPolicy::Diffusion(p) => diffusion::validation_loss(p, val, seed),
        }
    }

    pub fn metadata(&self) -> serde_json::Value {
        match self {
            TrainedPolicy::Act(p) => serde_json::json!({
                "head": "cvae_mlp",
                "chunk_h": p.config.chunk_h,
                "width": "absolute",
                "ensemble_weighting": "newest chunk weight 1, chunk predicted i steps earlier e^(-k i)",
                "ensemble_k": p.config.ensemble_k,
            }),
            TrainedPolicy::Diffusion(p) => serde_json::json!({
                "head": "film_conv1d",
                "beta_schedule": { "kind": "linear", "start": diffusion::BETA_START, "end": diffusion::BETA_END },
                "update": "A(k-1) = alpha_k (A(k) - gamma_k eps + N(0, sigma_k^2))",
                "alpha": "1/sqrt(1-beta)",
                "gamma": "beta/sqrt(1-alpha_bar)",
                "sigma": "sqrt(posterior variance) * sqrt(1-beta), zero at the last step",
                "k_train": p.config.k_train,
                "inference_timesteps": p.infer_schedule.timesteps,
                "exec_horizon": p.config.exec_horizon,
            }),
        }
    }

    pub fn save(&self, prefix: &Path) -> Result<()> {
        save_checkpoint(prefix, &self.params())
    }
}

/// Trains one cell's policy.
pub fn train_cell(
    cfg: &Config,
    cell: &CellSpec,
    encoders: &EncoderPair,
    train: &[TrajectoryRecord],
) -> Result<(TrainedPolicy, TrainReport)> {
    let enc = cell_encoder(cfg, cell, encoders)?;
    let mut rng = rng_from_seed(cell.train_seed(&cfg.seeds));
    Ok(match cell.policy {
        PolicyKind::Act => {
            let (p, r) = act::train_act(train, enc, &cfg.act, &mut rng)?;
            (TrainedPolicy::Act(p), r)
        }
        PolicyKind::Diffusion => {
            let (p, r) = diffusion::train_diffusion(train, enc, &cfg.diffusion, &mut rng)?;
            (TrainedPolicy::Diffusion(p), r)
        }
    })
}

/// Untrained architecture for `cell`, ready to receive checkpoint weights.
pub fn policy_skeleton(cfg: &Config, cell: &CellSpec) -> Result<TrainedPolicy> {
    let enc = cell_encoder(cfg, cell, &EncoderPair::init(cfg)?)?;
    let mut rng = rng_from_seed(0);
    let fd = enc.feature_dim();
    Ok(match cell.policy {
        PolicyKind::Act => {
            let model = ChunkPredictor::new("act", fd, &cfg.act, &mut rng);
            TrainedPolicy::Act(ActPolicy::new(enc, model, cfg.act.clone()))
        }
        PolicyKind::Diffusion => {
            let net = NoisePredictionNet::new("diffusion", fd, 4, cfg.diffusion.pred_horizon, &cfg.diffusion, &mut rng);
            TrainedPolicy::Diffusion(DiffusionPolicy::new(enc, net, cfg.diffusion.clone())?)
        }
    })
}

pub fn load_policy(cfg: &Config, cell: &CellSpec, prefix: &Path) -> Result<TrainedPolicy> {
    let mut p = policy_skeleton(cfg, cell)?;
    load_checkpoint(prefix, &mut p.params_mut())?;
    Ok(p)
}

/// Trains and evaluates one cell.
pub fn run_cell(
    cfg: &Config,
    cell: &CellSpec,
    encoders: &EncoderPair,
    train: &[TrajectoryRecord],
    val: &[TrajectoryRecord],
) -> Result<(MetricsReport, TrainedPolicy)> {
    let (mut policy, training) = train_cell(cfg, cell, encoders, train)?;
    let env = Env::new(cfg.env.clone())?;
    let e = &cfg.experiment;
    let eps = evaluate(policy.as_policy(), &env, &cfg.sensors, e.eval_episodes, e.eval_noise_std_mm, cfg.seeds.eval)?;
    let mut report = MetricsReport::from_episodes(cell, &eps, cfg.seeds.eval, cell.train_seed(&cfg.seeds), e.eval_noise_std_mm);
    report.validation_loss = policy.validation_loss(val, derive_seed(cfg.seeds.train, 99))?;
    report.training = training;
    report.metadata = policy.metadata();
    Ok((report, policy))
}

#[derive(Debug, Clone, Default)]
pub struct MatrixOutcome {
    pub reports: Vec<MetricsReport>,
    /// `(cell, error)` for cells that did not complete.
    pub failures: Vec<(String, String)>,
}

impl MatrixOutcome {
    pub fn get(&self, modality: Modality, pretrained: bool) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.modality == modality && r.pretrained == pretrained)
    }
}

pub fn combined_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from("cell,success_rate,median_strain,episodes,seed\n");
    for r in reports {
        let _ = writeln!(s, "{},{:.6},{:.9},{},{}", r.cell, r.success_rate, r.median_strain, r.episodes, r.eval_seed);
    }
    s
}

/// Plain-text comparison of the cells.
pub fn summary_text(outcome: &MatrixOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<40} {:>8} {:>14} {:>9}", "cell", "success", "median_strain", "episodes");
    for r in &outcome.reports {
        let _ = writeln!(s, "{:<40} {:>8.3} {:>14.6} {:>9}", r.cell, r.success_rate, r.median_strain, r.episodes);
    }
    for (cell, err) in &outcome.failures {
        let _ = writeln!(s, "{cell:<40} FAILED: {err}");
    }
    let pair = |m| Some((outcome.get(m, true)?, outcome.get(m, false)?));
    if let Some((p, n)) = pair(Modality::Vision) {
        let _ = writeln!(
            s,
            "\nvision: pretrained - scratch success = {:+.1} points",
            100.0 * (p.success_rate - n.success_rate)
        );
    }
    if let (Some(vn), Some(vt)) = (outcome.get(Modality::Vision, false), outcome.get(Modality::VisionTactile, true)) {
        let _ = writeln!(
            s,
            "vision_tactile pretrained - vision scratch success = {:+.1} points",
            100.0 * (vt.success_rate - vn.success_rate)
        );
    }
    if let (Some(vp), Some(vt)) = (outcome.get(Modality::Vision, true), outcome.get(Modality::VisionTactile, true)) {
        if vt.success_rate > 0.0 {
            let _ = writeln!(s, "vision pretrained / vision_tactile pretrained = {:.3}", vp.success_rate / vt.success_rate);
        }
    }
    for m in [Modality::Vision, Modality::Tactile, Modality::VisionTactile] {
        if let Some((p, n)) = pair(m) {
            if n.median_strain > 0.0 {
                let change = 100.0 * (p.median_strain / n.median_strain - 1.0);
                let _ = writeln!(s, "{}: median strain pretrained vs scratch {:+.1}%", m.label(), change);
            } else {
                let _ = writeln!(
                    s,
                    "{}: median strain pretrained {:.6} vs scratch {:.6}",
                    m.label(),
                    p.median_strain,
                    n.median_strain
                );
            }
        }
    }
    let _ = writeln!(
        s,
        "\nStrain values come from a synthetic sensor; compare cells directionally, not against absolute percentages."
    );
    s
}

/// Writes the LAB rendering of a few tactile frames from an expert rollout.
pub fn write_tactile_renders(cfg: &Config, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let env = Env::new(cfg.env.clone())?;
    let (rec, _) = record_expert_episode(&env, &cfg.sensors, 0.0, cfg.seeds.data)?;
    let best = (0..rec.len())
        .max_by(|&a, &b| mean_abs_tangential_strain(&rec.tactile[a]).total_cmp(&mean_abs_tangential_strain(&rec.tactile[b])))
        .unwrap_or(0);
    for (tag, t) in [("start", 0), ("peak", best), ("end", rec.len() - 1)] {
        let img = render_lab(&rec.tactile[t]);
        let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.to_rgb8()?)
            .ok_or_else(|| Error::Config("render buffer size mismatch".into()))?;
        buf.save(dir.join(format!("tactile_{tag}.png")))?;
    }
    Ok(())
}

/// Demonstrations for a run: loaded if configured, collected otherwise.
pub fn demos_for(cfg: &Config) -> Result<Vec<TrajectoryRecord>> {
    match &cfg.experiment.dataset {
        Some(dir) => read_dataset(Path::new(dir)),
        None => {
            let env = Env::new(cfg.env.clone())?;
            collect_demos(&env, &cfg.sensors, cfg.experiment.demo_count, cfg.experiment.expert_noise_std, cfg.seeds.data)
        }
    }
}

/// Full grid: data, shared pretraining, then every cell. Cell failures are
/// recorded and the remaining cells still run.
pub fn run_matrix(cfg: &Config, out: &Path) -> Result<MatrixOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out.join("cells"))?;
    cfg.write_resolved(out)?;
    let demos = demos_for(cfg)?;
    let (train, val) = split(&demos, cfg.experiment.train_frac, cfg.seeds.data)?;
    drop(demos);
    let cells = CellSpec::grid(&cfg.experiment);
    let encoders = if cells.iter().any(|c| c.pretrained) {
        let (pair, report) = pretrain_encoders(cfg, &train)?;
        write_loss_csv(&out.join("pretrain_loss.csv"), &report.curve)?;
        Some(pair)
    } else {
        None
    };
    let fresh = EncoderPair::init(cfg)?;
    let mut outcome = MatrixOutcome::default();
    for cell in &cells {
        let name = cell.name();
        log::info!("cell {name}");
        let enc = if cell.pretrained { encoders.as_ref().expect("pretrained above") } else { &fresh };
        match run_cell(cfg, cell, enc, &train, &val) {
            Ok((report, _)) => {
                std::fs::write(out.join("cells").join(format!("{name}.json")), serde_json::to_string_pretty(&report)?)?;
                log::info!("cell {name}: success {:.3}", report.success_rate);
                outcome.reports.push(report);
            }
            Err(e) => {
                log::error!("cell {name} failed: {e}");
                outcome.failures.push((name, e.to_string()));
            }
        }
    }
    write_outputs(out, &outcome)?;
    if cfg.experiment.renders {
        write_tactile_renders(cfg, &out.join("renders"))?;
    }
    Ok(outcome)
}

pub fn write_outputs(out: &Path, outcome: &MatrixOutcome) -> Result<()> {
    std::fs::write(out.join("matrix.csv"), combined_csv(&outcome.reports))?;
    let mut f = std::fs::File::create(out.join("summary.txt"))?;
    f.write_all(summary_text(outcome).as_bytes())?;
    Ok(())
}

/// Reads every per-cell JSON report in `dir/cells`, sorted by cell name.
pub fn read_reports(dir: &Path) -> Result<Vec<MetricsReport>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir.join("cells"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)).collect()
}
