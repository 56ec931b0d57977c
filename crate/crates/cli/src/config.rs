//! JSON run configuration. Every section is optional; command-line flags are
//! applied on top of whatever the file provides.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use koopman_core::dynamics::{SystemKind, SystemSpec};
use koopman_core::spectral::SpectralOptions;
use koopman_core::trainer::TrainConfig;
use koopman_core::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub system: Option<SystemKind>,
    pub n_train: usize,
    pub n_test: usize,
    pub traj_len: usize,
    /// Full system description; replaces the standard one for `system`.
    pub spec: Option<SystemSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            system: None,
            n_train: 100,
            n_test: 20,
            traj_len: 250,
            spec: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub spectral: SpectralOptions,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
            .with_context(|| "loading run configuration")?;
        Ok(cfg)
    }

    /// `--seed` beats the file's top-level `seed`, which beats `train.seed`.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> u64 {
        let seed = flag.or(self.seed).unwrap_or(self.train.seed);
        self.seed = Some(seed);
        self.train.seed = seed;
        seed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"epocs": {}}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"lr": 0.01}, "data": {"n_train": 5}}"#).unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.data.n_train, 5);
        assert_eq!(c.data.traj_len, 250);
    }

    #[test]
    fn seed_precedence() {
        let mut c: RunConfig = serde_json::from_str(r#"{"seed": 4, "train": {"seed": 9}}"#).unwrap();
        assert_eq!(c.clone().resolve_seed(Some(1)), 1);
        assert_eq!(c.resolve_seed(None), 4);
        assert_eq!(c.train.seed, 4);
        let mut d: RunConfig = serde_json::from_str(r#"{"train": {"seed": 9}}"#).unwrap();
        assert_eq!(d.resolve_seed(None), 9);
    }
}
