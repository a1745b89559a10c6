//! Run configuration: one TOML file covering every module, layered over a preset.
//!
//! The file may name a `preset` (`paper`, `desk` or `tiny`); its keys are
//! merged over that preset and any key the preset does not know is rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SynthesisConfig;
use crate::error::{Error, Result};
use crate::networks::ModelConfig;
use crate::sampler::PhiLevel;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 128×128 model with the reference architecture.
    #[default]
    Paper,
    /// 32×32 model with T = 200.
    Desk,
    /// 16×16 model for gradient checks.
    Tiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Paired dataset root (`raw/`, `reference/`).
    pub root: Option<PathBuf>,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, train_fraction: 0.9, split_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub phi_level: PhiLevel,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 25, seed: 0, phi_level: PhiLevel::Destination }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub synthesis: SynthesisConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Paper => (ModelConfig::default(), TrainConfig::default()),
            Preset::Desk => (ModelConfig::desk(), TrainConfig::desk()),
            Preset::Tiny => (ModelConfig::tiny(), TrainConfig { batch_size: 2, ..TrainConfig::desk() }),
        };
        Self {
            preset,
            model,
            train,
            data: DataConfig::default(),
            sampler: SamplerConfig::default(),
            synthesis: SynthesisConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match user.get("preset") {
            None => Preset::default(),
            Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| Error::Config(format!("preset: {e}")))?,
        };
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, user);
        let cfg: Self =
            toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synthesis.validate()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config(format!("train fraction {} must be in (0, 1)", self.data.train_fraction)));
        }
        let t = self.model.schedule.steps;
        if self.sampler.steps == 0 || self.sampler.steps > t {
            return Err(Error::Config(format!("sampler steps {} must be in 1..={t}", self.sampler.steps)));
        }
        Ok(())
    }
}

/// Overlays `user` on `base`; nested tables merge unless the user table carries a
/// `kind` tag, which replaces the whole variant.
fn merge(mut base: toml::Table, user: toml::Table) -> toml::Table {
    for (k, v) in user {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !u.contains_key("kind") => {
                base.insert(k, toml::Value::Table(merge(b, u)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}
