//! JSON run configuration.
//!
//! Every section is optional in the input document; missing keys take the
//! defaults of the corresponding type, unknown keys are rejected. The fully
//! resolved document can be written back so that a run records every value
//! it used.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ArchSpec;
use crate::model::SharingSpec;
use crate::objective::{CriticSpec, HybridObjectiveConfig};
use crate::synthetic::DomainPairSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DomainPairSpec,
    pub arch: ArchSpec,
    pub sharing: SharingSpec,
    pub critic: CriticSpec,
    pub objective: HybridObjectiveConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Pretty-printed JSON with every field present.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.arch.validate()?;
        self.critic.validate()?;
        self.objective.validate()?;
        self.train.validate()?;
        if self.arch.dim != self.data.dim() {
            return Err(Error::config(
                "arch.dim",
                format!("data has {} coordinates, architecture expects {}", self.data.dim(), self.arch.dim),
            ));
        }
        if let SharingSpec::Prefix(k) = self.sharing {
            if k > self.arch.num_layers() {
                return Err(Error::config(
                    "sharing.prefix",
                    format!("flows have {} layers, cannot share {k}", self.arch.num_layers()),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_to_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let echoed: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        for key in ["data", "arch", "sharing", "critic", "objective", "train"] {
            assert!(echoed.get(key).is_some(), "{key} missing from resolved config");
        }
        assert!(echoed["train"].get("clip_norm").is_some());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3}, "data": {"true_map": "shear(0.5)"}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn negative_lambda_names_the_field() {
        let err = RunConfig::from_json(r#"{"objective": {"lambda_a": -1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(err.to_string().contains("lambda_a"), "{err}");
    }

    #[test]
    fn mismatched_dimension_is_rejected() {
        let err = RunConfig::from_json(r#"{"arch": {"dim": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("arch.dim"), "{err}");
    }
}
