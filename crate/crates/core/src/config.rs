//! Run configuration for the command-line tool: fit options, phantom suite
//! and metric options, read from TOML or JSON text.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics::DEFAULT_NSD_TAU;
use crate::optimizer::FitConfig;
use crate::phantom::PhantomSpec;

/// Base values for the `fit` section.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Short budget, large steps; suited to desk-sized volumes.
    #[default]
    Desk,
    /// Small learning rates (3e-4 / 1e-3) and a long budget.
    Standard,
}

impl Preset {
    pub fn fit(self) -> FitConfig {
        match self {
            Preset::Desk => FitConfig::desk(),
            Preset::Standard => FitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    /// NSD tolerance (mm).
    pub tau: f64,
    /// Voxel spacing used when the inputs carry none of their own (mm).
    pub spacing: Option<[f64; 3]>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            tau: DEFAULT_NSD_TAU,
            spacing: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub fit: FitConfig,
    pub phantom: PhantomSpec,
    pub metrics: MetricOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::with_preset(Preset::default())
    }
}

impl RunConfig {
    pub fn with_preset(preset: Preset) -> Self {
        RunConfig {
            preset,
            fit: preset.fit(),
            phantom: PhantomSpec::default(),
            metrics: MetricOptions::default(),
        }
    }

    /// Parses TOML text. Keys missing from `fit` take the preset's values.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::format("config", e.message().to_string()))?;
        let json = serde_json::to_value(value).map_err(|e| Error::format("config", e.to_string()))?;
        Self::from_value(json)
    }

    /// Parses JSON text. Keys missing from `fit` take the preset's values.
    pub fn from_json(text: &str) -> Result<Self> {
        let json: Value = serde_json::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        Self::from_value(json)
    }

    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    fn from_value(value: Value) -> Result<Self> {
        let Value::Object(mut top) = value else {
            return Err(Error::format("config", "expected a table at the top level"));
        };
        let preset: Preset = match top.remove("preset") {
            Some(v) => serde_json::from_value(v).map_err(|e| Error::format("config", format!("preset: {e}")))?,
            None => Preset::default(),
        };
        let mut base = serde_json::to_value(RunConfig::with_preset(preset)).expect("config serializes");
        let sections = base.as_object_mut().expect("object");
        for (key, v) in top {
            match (sections.get_mut(&key), v) {
                (Some(Value::Object(dst)), Value::Object(src)) => {
                    for (k, x) in src {
                        dst.insert(k, x);
                    }
                }
                (Some(_), _) => return Err(Error::format("config", format!("section `{key}` must be a table"))),
                (None, _) => return Err(Error::format("config", format!("unknown field `{key}`"))),
            }
        }
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        self.phantom.validate()?;
        if !(self.metrics.tau >= 0.0) {
            return Err(Error::arg("metrics.tau must be non-negative"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_preset_values() {
        let cfg = RunConfig::from_toml("preset = \"standard\"\n[fit]\niters = 7\nwarmup_iters = 2\n").unwrap();
        assert_eq!(cfg.fit.iters, 7);
        assert_eq!(cfg.fit.lr_params, 3e-4);
        let cfg = RunConfig::from_json(r#"{"fit":{"gamma":0.0}}"#).unwrap();
        assert_eq!(cfg.fit.gamma, 0.0);
        assert_eq!(cfg.fit.lr_params, FitConfig::desk().lr_params);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[fit]\nitres = 3\n").unwrap_err().to_string();
        assert!(err.contains("itres"), "{err}");
        let err = RunConfig::from_toml("[fitt]\n").unwrap_err().to_string();
        assert!(err.contains("fitt"), "{err}");
        let err = RunConfig::from_json(r#"{"metrics":{"tua":1}}"#).unwrap_err().to_string();
        assert!(err.contains("tua"), "{err}");
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[fit]\nparam_span = 0\n").is_err());
        assert!(RunConfig::from_toml("[phantom]\nc_cls = 3\n").is_err());
    }
}
