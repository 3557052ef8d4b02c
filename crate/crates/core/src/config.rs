//! Run configuration: one TOML document with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::CalibrationConfig;
use crate::correction::CorrectionConfig;
use crate::derive::DeriveConfig;
use crate::metrics::OlsAggregate;
use crate::vqa::VqaFamily;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid value for {field}: {message}")]
    Value { field: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqaConfig {
    /// Families to generate; empty means all.
    pub families: Vec<VqaFamily>,
    /// Render overlay images next to the JSONL output.
    pub render_overlays: bool,
    /// Share of episodes held out for evaluation when no id list is given.
    pub eval_fraction: f64,
}

impl Default for VqaConfig {
    fn default() -> Self {
        Self {
            families: Vec::new(),
            render_overlays: true,
            eval_fraction: 0.2,
        }
    }
}

impl VqaConfig {
    pub fn family_set(&self) -> std::collections::BTreeSet<VqaFamily> {
        if self.families.is_empty() {
            VqaFamily::ALL.into_iter().collect()
        } else {
            self.families.iter().copied().collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub theta: f64,
    pub aggregate: OlsAggregate,
    pub iou_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            theta: 1.0,
            aggregate: OlsAggregate::EntryMean,
            iou_threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 means one per logical core.
    pub jobs: usize,
    /// Robot description directory searched before the built-in models.
    pub robots_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcConfig {
    pub subset_count: usize,
    pub samples_per_subset: usize,
    pub pass_ratio: f64,
}

impl Default for QcConfig {
    fn default() -> Self {
        Self {
            subset_count: 100,
            samples_per_subset: 50,
            pass_ratio: 0.9,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub calibration: CalibrationConfig,
    pub correction: CorrectionConfig,
    pub derive: DeriveConfig,
    pub vqa: VqaConfig,
    pub metrics: MetricsConfig,
    pub pipeline: PipelineConfig,
    pub qc: QcConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &str, message: &str| {
            Err(ConfigError::Value {
                field: field.into(),
                message: message.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.metrics.theta) {
            return bad("metrics.theta", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.vqa.eval_fraction) {
            return bad("vqa.eval_fraction", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.qc.pass_ratio) {
            return bad("qc.pass_ratio", "must lie in [0, 1]");
        }
        if self.qc.subset_count == 0 || self.qc.samples_per_subset == 0 {
            return bad("qc", "subset_count and samples_per_subset must be positive");
        }
        if !(self.correction.aspect_limit >= 1.0) {
            return bad("correction.aspect_limit", "must be at least 1");
        }
        if self.calibration.max_iterations == 0 {
            return bad("calibration.max_iterations", "must be positive");
        }
        if !(self.derive.affordance_margin >= 0.0) {
            return bad("derive.affordance_margin", "must be non-negative");
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialization of the effective config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn sections_override_fields() {
        let cfg = Config::from_toml_str(
            "[qc]\npass_ratio = 0.8\n[vqa]\nfamilies = [\"planning\", \"trace_hard\"]\n[metrics]\naggregate = \"all_dims\"\n",
        )
        .unwrap();
        assert_eq!(cfg.qc.pass_ratio, 0.8);
        assert_eq!(cfg.qc.subset_count, 100);
        assert_eq!(cfg.vqa.family_set().len(), 2);
        assert_eq!(cfg.metrics.aggregate, OlsAggregate::AllDims);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(Config::from_toml_str("[qc]\nfoo = 1\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(Config::from_toml_str("[qc]\npass_ratio = 1.5\n"), Err(ConfigError::Value { .. })));
        assert!(matches!(Config::from_toml_str("[vqa]\nfamilies = [\"nope\"]\n"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn round_trip_and_hash() {
        let mut cfg = Config::default();
        cfg.pipeline.seed = 9;
        let back = Config::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(Config::default().hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }
}
