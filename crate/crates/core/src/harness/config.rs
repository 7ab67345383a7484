//! Layered configuration: defaults, then TOML files in order, then `key=value`
//! overrides addressed by dotted path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::PretrainConfig;
use crate::data::SensorConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::policy::act::ActConfig;
use crate::policy::diffusion::DiffusionConfig;
use crate::policy::Modality;
use crate::sim::EnvConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Act,
    Diffusion,
}

impl PolicyKind {
    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Act => "act",
            PolicyKind::Diffusion => "diffusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub pretrain: u64,
    pub train: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { data: 11, pretrain: 23, train: 37, eval: 41 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub policy: PolicyKind,
    pub modalities: Vec<Modality>,
    /// Pretraining states to run for each modality.
    pub pretrained: Vec<bool>,
    pub demo_count: usize,
    pub expert_noise_std: f64,
    pub train_frac: f64,
    pub eval_episodes: usize,
    pub eval_noise_std_mm: f64,
    /// Optional dataset directory to load instead of collecting.
    pub dataset: Option<String>,
    /// Write PNG renders of a few tactile frames per cell.
    pub renders: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            policy: PolicyKind::Act,
            modalities: vec![Modality::Vision, Modality::Tactile, Modality::VisionTactile],
            pretrained: vec![true, false],
            demo_count: 60,
            expert_noise_std: 1.0,
            train_frac: 0.8,
            eval_episodes: 40,
            eval_noise_std_mm: 2.5,
            dataset: None,
            renders: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seeds: Seeds,
    pub experiment: ExperimentConfig,
    pub env: EnvConfig,
    pub sensors: SensorConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub act: ActConfig,
    pub diffusion: DiffusionConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.modalities.is_empty() || e.pretrained.is_empty() {
            return Err(Error::Config("experiment grid is empty".into()));
        }
        if e.demo_count == 0 {
            return Err(Error::Config("demo_count must be at least 1".into()));
        }
        if !(e.train_frac > 0.0 && e.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac must lie in (0, 1), got {}", e.train_frac)));
        }
        if !(e.eval_noise_std_mm >= 0.0) || !(e.expert_noise_std >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        self.env.validate()?;
        self.sensors.validate()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.act.validate()?;
        self.diffusion.validate()
    }

    /// Defaults, overlaid with each file in order and then each override.
    pub fn load<P: AsRef<Path>>(files: &[P], overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(Config::default())?;
        for f in files {
            let text = std::fs::read_to_string(f.as_ref())?;
            let layer: toml::Value = toml::from_str(&text)?;
            merge(&mut root, layer);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Config = root.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved.toml"), self.to_toml()?)?;
        Ok(())
    }
}

fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let value = parse_literal(raw.trim());
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let mut node = root;
    for (i, k) in keys.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            table.insert((*k).to_string(), value);
            return Ok(());
        }
        node = table.entry((*k).to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let back: Config = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn layers_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.toml");
        let b = dir.path().join("b.toml");
        std::fs::write(&a, "[experiment]\neval_episodes = 5\ndemo_count = 9\n").unwrap();
        std::fs::write(&b, "[experiment]\neval_episodes = 7\n[act]\nkl_weight = 2.0\n").unwrap();
        let cfg = Config::load(
            &[&a, &b],
            &["experiment.policy=diffusion".into(), "experiment.modalities=[\"vision\"]".into(), "seeds.eval=5".into()],
        )
        .unwrap();
        assert_eq!(cfg.experiment.eval_episodes, 7);
        assert_eq!(cfg.experiment.demo_count, 9);
        assert_eq!(cfg.act.kl_weight, 2.0);
        assert_eq!(cfg.experiment.policy, PolicyKind::Diffusion);
        assert_eq!(cfg.experiment.modalities, vec![Modality::Vision]);
        assert_eq!(cfg.seeds.eval, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::load::<&Path>(&[], &["act.nonsense=1".into()]).is_err());
        assert!(Config::load::<&Path>(&[], &["experiment.train_frac=1.0".into()]).is_err());
        assert!(Config::load::<&Path>(&[], &["no_equals".into()]).is_err());
    }
}
