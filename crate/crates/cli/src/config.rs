//! Experiment configuration and its content hash.

use std::path::Path;

use reconbench::attacks::{AttackConfig, AttackVariant};
use reconbench::defenses::{AtGridConfig, PurifyConfig, PURIFY_RATIOS};
use reconbench::world::WorldConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackExperiment {
    pub attack: AttackConfig,
    /// Balanced test samples per class.
    pub per_class: usize,
}

impl Default for AttackExperiment {
    fn default() -> Self {
        Self {
            attack: AttackConfig {
                early_stop: true,
                ..AttackConfig::default()
            },
            per_class: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferExperiment {
    pub attack: AttackConfig,
    pub per_class: usize,
}

impl Default for TransferExperiment {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            per_class: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PurifyExperiment {
    pub ratios: Vec<f64>,
    pub purify: PurifyConfig,
    /// Per class, taken from the head of the attacked subset; must not
    /// exceed `attack.per_class`.
    pub per_class: usize,
}

impl Default for PurifyExperiment {
    fn default() -> Self {
        Self {
            ratios: PURIFY_RATIOS.to_vec(),
            purify: PurifyConfig::default(),
            per_class: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvTrainExperiment {
    /// Generators whose detectors are hardened; empty means all.
    pub generators: Vec<String>,
    pub grid: AtGridConfig,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub eval_attack: AttackConfig,
    pub test_per_class: usize,
}

impl Default for AdvTrainExperiment {
    fn default() -> Self {
        Self {
            generators: Vec::new(),
            grid: AtGridConfig::default(),
            train_per_class: 500,
            val_per_class: 50,
            eval_attack: AttackConfig {
                early_stop: true,
                variant: AttackVariant::Apgd,
                ..AttackConfig::default()
            },
            test_per_class: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RhoExperiment {
    pub attack: AttackConfig,
    pub per_class: usize,
}

impl Default for RhoExperiment {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            per_class: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollapseExperiment {
    pub n: usize,
}

impl Default for CollapseExperiment {
    fn default() -> Self {
        Self { n: 1000 }
    }
}

/// Everything one workspace is built from. Every section is optional in
/// the JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed copied into every sub-configuration.
    pub seed: u64,
    pub world: WorldConfig,
    pub attack: AttackExperiment,
    pub transfer: TransferExperiment,
    pub purify: PurifyExperiment,
    pub advtrain: AdvTrainExperiment,
    pub rho: RhoExperiment,
    pub collapse: CollapseExperiment,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            attack: AttackExperiment::default(),
            transfer: TransferExperiment::default(),
            purify: PurifyExperiment::default(),
            advtrain: AdvTrainExperiment::default(),
            rho: RhoExperiment::default(),
            collapse: CollapseExperiment::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    /// Propagates the master seed and checks every section.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        let seed = self.seed;
        self.world.seed = seed;
        self.attack.attack.seed = seed;
        self.transfer.attack.seed = seed;
        self.purify.purify.seed = seed;
        self.advtrain.grid.seed = seed;
        self.advtrain.eval_attack.seed = seed;
        self.rho.attack.seed = seed;
        self.world.validate()?;
        let ids: Vec<&str> = self.world.generators.iter().map(|g| g.id.as_str()).collect();
        for id in &ids {
            if !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || id.starts_with('.') {
                return Err(CliError::Config(format!("generator id '{id}' must use only [A-Za-z0-9._-]")));
            }
        }
        let referenced = self.advtrain.generators.iter().chain(self.purify.purify.source.iter());
        for r in referenced {
            if !ids.contains(&r.as_str()) {
                return Err(CliError::Config(format!("unknown generator '{r}'")));
            }
        }
        for a in [&self.attack.attack, &self.transfer.attack, &self.advtrain.eval_attack, &self.rho.attack] {
            a.validate()?;
        }
        self.purify.purify.validate()?;
        for r in &self.purify.ratios {
            if !(*r > 0.0 && *r <= 0.5) {
                return Err(CliError::Config(format!("purification ratio {r} outside (0, 0.5]")));
            }
        }
        let sizes = [
            ("attack.per_class", self.attack.per_class),
            ("transfer.per_class", self.transfer.per_class),
            ("advtrain.train_per_class", self.advtrain.train_per_class),
            ("advtrain.val_per_class", self.advtrain.val_per_class),
            ("advtrain.test_per_class", self.advtrain.test_per_class),
            ("purify.per_class", self.purify.per_class),
            ("rho.per_class", self.rho.per_class),
            ("collapse.n", self.collapse.n),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(CliError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.purify.per_class > self.attack.per_class {
            return Err(CliError::Config("purify.per_class exceeds attack.per_class".into()));
        }
        Ok(self)
    }

    /// SHA-256 of the canonical JSON form. Object keys serialize sorted, so
    /// the hash does not depend on key order in the source file.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
