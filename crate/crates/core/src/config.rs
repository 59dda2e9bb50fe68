//! Experiment configuration: one TOML document with `[data]`, `[model]`,
//! `[loss_weights]`, `[train]`, `[simulate]` and `[eval]` sections.
//!
//! Resolution order, later layers winning: built-in defaults, the model size
//! named by `model.size`, the ablation preset named by `train.preset`, the
//! values in the file, then `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::{
    losses::LossWeights,
    metrics::MetricsConfig,
    networks::ModelConfig,
    training::{Preset, TrainConfig},
    Error, Result,
};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training manifest.
    pub manifest: Option<PathBuf>,
    /// Held-out manifest scored during training; falls back to `holdout`.
    pub validation_manifest: Option<PathBuf>,
    /// Number of trailing training pairs kept out of training for validation.
    pub holdout: usize,
    /// Bilinear resize applied on load, `[height, width]`.
    pub resize: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub level: usize,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { level: 3, seed: 0 }
    }
}

/// Named model sizes accepted by `model.size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Full,
    Toy,
}

impl ModelSize {
    pub fn config(self) -> ModelConfig {
        match self {
            ModelSize::Full => ModelConfig::full(),
            ModelSize::Toy => ModelConfig::toy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss_weights: LossWeights,
    pub train: TrainConfig,
    pub simulate: SimulateConfig,
    pub eval: MetricsConfig,
}

fn merge(base: &mut Table, overlay: Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn parse_scalar(text: &str) -> Value {
    let wrapped = format!("v = {text}");
    match wrapped.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.to_string())),
        Err(_) => Value::String(text.to_string()),
    }
}

/// Parses `a.b.c=value` into a nested table. The value is read as a TOML
/// literal when possible and as a bare string otherwise.
pub fn parse_override(text: &str) -> Result<Table> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{text}` has an empty key")));
    }
    let mut value = parse_scalar(raw.trim());
    for key in keys.iter().rev() {
        let mut t = Table::new();
        t.insert((*key).to_string(), value);
        value = Value::Table(t);
    }
    match value {
        Value::Table(t) => Ok(t),
        _ => unreachable!("keys are non-empty"),
    }
}

fn take_str(table: &mut Table, section: &str, key: &str) -> Result<Option<String>> {
    let Some(Value::Table(sec)) = table.get_mut(section) else {
        return Ok(None);
    };
    match sec.remove(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(Error::Config(format!("{section}.{key} must be a string, got {other}"))),
    }
}

impl ExperimentConfig {
    /// Resolves a configuration document plus overrides.
    pub fn resolve(document: &str, overrides: &[String]) -> Result<Self> {
        let mut user: Table = document
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            merge(&mut user, parse_override(o)?);
        }
        let size = take_str(&mut user, "model", "size")?;
        let preset = match user.get("train").and_then(|t| t.get("preset")) {
            Some(Value::String(s)) => Some(s.parse::<Preset>()?),
            Some(other) => return Err(Error::Config(format!("train.preset must be a string, got {other}"))),
            None => None,
        };

        let mut base = ExperimentConfig::default();
        if let Some(size) = size {
            base.model = match size.as_str() {
                "full" => ModelSize::Full,
                "toy" => ModelSize::Toy,
                _ => return Err(Error::Config(format!("unknown model.size `{size}` (full, toy)"))),
            }
            .config();
        }
        if let Some(p) = preset {
            p.apply(&mut base);
        }
        let mut table = Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, user);
        let config: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::resolve(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        self.train.validate()?;
        if !(1..=crate::deform_sim::LEVELS).contains(&self.simulate.level) {
            return Err(Error::Config(format!(
                "simulate.level must be in 1..={}, got {}",
                crate::deform_sim::LEVELS,
                self.simulate.level
            )));
        }
        if !(self.eval.data_range > 0.0) {
            return Err(Error::Config("eval.data_range must be positive".into()));
        }
        Ok(())
    }

    /// Fully materialized TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved TOML.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::AdvMode;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::resolve("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.weight_decay, 1e-4);
        assert_eq!(c.train.batch_size, 1);
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.loss_weights.lambda_reg, 20.0);
    }

    #[test]
    fn resolved_round_trip_is_stable() {
        let c = ExperimentConfig::resolve(
            "[model]\nsize = \"toy\"\n[train]\npreset = \"G1\"\nmax_steps = 7\n",
            &["loss_weights.lambda_smt=3".to_string()],
        )
        .unwrap();
        assert_eq!(c.model.generator.base_width, ModelConfig::toy().generator.base_width);
        assert_eq!(c.train.ablation.adv_mode, AdvMode::Conventional);
        assert_eq!(c.train.max_steps, Some(7));
        assert_eq!(c.loss_weights.lambda_smt, 3.0);
        let again = ExperimentConfig::resolve(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn file_values_beat_preset() {
        let c = ExperimentConfig::resolve(
            "[train]\npreset = \"G1\"\n[train.ablation]\nadv_mode = \"deformation_aware\"\n",
            &[],
        )
        .unwrap();
        assert_eq!(c.train.ablation.adv_mode, AdvMode::DeformationAware);
    }

    #[test]
    fn errors_are_config_errors() {
        for doc in [
            "[train]\nlearning_rat = 1.0\n",
            "[simulate]\nlevel = 9\n",
            "[model]\nsize = \"huge\"\n",
            "[train]\npreset = \"Z\"\n",
            "[loss_weights]\nlambda_reg = -1.0\n",
            "not toml ===",
        ] {
            assert!(
                matches!(ExperimentConfig::resolve(doc, &[]), Err(Error::Config(_))),
                "{doc}"
            );
        }
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn override_parsing() {
        let t = parse_override("train.seed=5").unwrap();
        assert_eq!(t["train"]["seed"].as_integer(), Some(5));
        let t = parse_override("data.manifest=/tmp/x.json").unwrap();
        assert_eq!(t["data"]["manifest"].as_str(), Some("/tmp/x.json"));
    }
}
