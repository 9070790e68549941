//! Command configuration files.
//!
//! A config file is either a full run config or a bare tuner config
//! (an object with `specs` and/or `layer_range` only).

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::composer::{self, UTuningConfig};
use crate::error::{Error, Result};
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum BackboneChoice {
    Preset(String),
    Config(BackboneConfig),
}

impl BackboneChoice {
    pub fn resolve(&self) -> Result<BackboneConfig> {
        match self {
            BackboneChoice::Preset(name) => BackboneConfig::preset(name).ok_or_else(|| {
                Error::config("backbone", format!("unknown backbone preset `{name}`"))
            }),
            BackboneChoice::Config(c) => {
                c.validate()?;
                Ok(c.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum TunerChoice {
    Preset(String),
    Config(UTuningConfig),
}

impl TunerChoice {
    pub fn resolve(&self) -> Result<(String, UTuningConfig)> {
        match self {
            TunerChoice::Preset(name) => composer::preset(name)
                .map(|c| (name.clone(), c))
                .ok_or_else(|| Error::config("utuning", format!("unknown tuner preset `{name}`"))),
            TunerChoice::Config(c) => Ok(("custom".into(), c.clone())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub equivalence: Option<f64>,
    pub adapter: Option<f64>,
    pub gate: Option<f64>,
    pub gradient: Option<f64>,
    pub identity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub backbone: Option<BackboneChoice>,
    pub utuning: Option<TunerChoice>,
    pub precision: Option<Precision>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub noise: Option<f64>,
    #[serde(default)]
    pub tolerance: Tolerances,
}

fn is_bare_tuner_config(v: &Value) -> bool {
    v.as_object()
        .is_some_and(|o| !o.is_empty() && o.keys().all(|k| k == "specs" || k == "layer_range"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::config("", e.to_string()))?;
        if is_bare_tuner_config(&value) {
            return Ok(RunConfig {
                utuning: Some(TunerChoice::Config(UTuningConfig::from_json(text)?)),
                ..Default::default()
            });
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config(
                path.display().to_string(),
                format!("cannot read config: {e}"),
            )
        })?;
        Self::from_json(&text)
    }

    /// Resolves presets and checks values before any computation.
    pub fn validate(&self) -> Result<()> {
        let backbone = match &self.backbone {
            Some(b) => Some(b.resolve()?),
            None => None,
        };
        if let Some(t) = &self.utuning {
            let (_, cfg) = t.resolve()?;
            cfg.validate(backbone.as_ref().unwrap_or(&BackboneConfig::desk()))?;
        }
        if let Some(n) = self.noise {
            if !(n.is_finite() && n >= 0.0) {
                return Err(Error::config("noise", "must be finite and ≥ 0"));
            }
        }
        if self.epochs == Some(0) {
            return Err(Error::config("epochs", "must be ≥ 1"));
        }
        let t = &self.tolerance;
        for (name, v) in [
            ("tolerance.equivalence", t.equivalence),
            ("tolerance.adapter", t.adapter),
            ("tolerance.gate", t.gate),
            ("tolerance.gradient", t.gradient),
            ("tolerance.identity", t.identity),
        ] {
            if v.is_some_and(|v| !(v.is_finite() && v > 0.0)) {
                return Err(Error::config(name, "tolerance must be positive"));
            }
        }
        Ok(())
    }

    pub fn tuner(&self) -> Result<Option<(String, UTuningConfig)>> {
        self.utuning.as_ref().map(TunerChoice::resolve).transpose()
    }

    pub fn backbone_config(&self) -> Result<Option<BackboneConfig>> {
        self.backbone
            .as_ref()
            .map(BackboneChoice::resolve)
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_tuner_file() {
        let c = RunConfig::from_json(&UTuningConfig::default_dual().to_json()).unwrap();
        assert_eq!(c.tuner().unwrap().unwrap().1, UTuningConfig::default_dual());
    }

    #[test]
    fn full_file_with_presets() {
        let c = RunConfig::from_json(
            r#"{"seed": 3, "backbone": "desk", "utuning": "scaling-scalar", "precision": "f32",
                "tolerance": {"gradient": 1e-5}}"#,
        )
        .unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.precision, Some(Precision::F32));
        assert_eq!(c.tuner().unwrap().unwrap().0, "scaling-scalar");
        assert_eq!(c.tolerance.gradient, Some(1e-5));
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        match RunConfig::from_json(r#"{"seed": 1, "sede": 2}"#).unwrap_err() {
            Error::Config { message, .. } => assert!(message.contains("sede"), "{message}"),
            e => panic!("{e}"),
        }
        match RunConfig::from_json(r#"{"tolerance": {"grad": 1}}"#).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "tolerance.grad"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"utuning": "nope"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"backbone": "huge"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"epochs": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"tolerance": {"gate": -1}}"#).is_err());
        assert!(RunConfig::from_json("[1, 2]").is_err());
    }
}
