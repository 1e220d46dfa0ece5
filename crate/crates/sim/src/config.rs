//! Experiment configuration. Every section has defaults that reproduce the
//! frozen synthetic benchmark; unknown keys are rejected.

use std::path::Path;

use biobackdoor_core::attack::{AttackConfig, GenerationConfig};
use biobackdoor_core::defense::VariationConfig;
use biobackdoor_core::feature_space::{ExtractorSpec, PopulationConfig, DEFAULT_MASK_FRACTION};
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub population: PopulationConfig,
    pub extractor: ExtractorSpec,
    pub mask: MaskConfig,
    pub pools: PoolConfig,
    pub generation: GenerationConfig,
    pub attack: AttackConfig,
    pub transfer: TransferConfig,
    pub detection: DetectionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 20_190_501,
            population: PopulationConfig::default(),
            extractor: ExtractorSpec::default(),
            mask: MaskConfig::default(),
            pools: PoolConfig::default(),
            generation: GenerationConfig::default(),
            attack: AttackConfig::default(),
            transfer: TransferConfig::default(),
            detection: DetectionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub fraction: f64,
    pub offset: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            fraction: DEFAULT_MASK_FRACTION,
            offset: 0,
            grid_rows: 8,
            grid_cols: 8,
        }
    }
}

/// User pools. Users are shuffled with the master seed and split in this
/// order: calibration, attackers, victims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub calibration_users: usize,
    pub attacker_users: usize,
    pub victim_users: usize,
    /// Attacker-victim pairs drawn for the attack sweep.
    pub pairs: usize,
    /// Pairs (victims from the calibration pool) used to fit the heuristic.
    pub heuristic_pairs: usize,
    /// Attacker samples closest to the attacker's raw mean that wear the
    /// perturbation.
    pub attacker_batch: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            calibration_users: 10,
            attacker_users: 10,
            victim_users: 10,
            pairs: 100,
            heuristic_pairs: 10,
            attacker_batch: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// Hidden widths of the unrelated-architecture surrogate.
    pub unrelated_hidden: Vec<usize>,
    /// Standard deviation of the noise added to the target weights for the
    /// related surrogate.
    pub related_noise: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            unrelated_hidden: vec![48],
            related_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    pub variation: VariationConfig,
    pub consecutive_flags_to_alarm: usize,
    /// Window of the sanitization hypersphere.
    pub hypersphere_k: usize,
    /// Percentile of legitimate centroid drift used as the hypersphere radius.
    pub hypersphere_percentile: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            variation: VariationConfig::default(),
            consecutive_flags_to_alarm: 1,
            hypersphere_k: 3,
            hypersphere_percentile: 95.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let value: toml::Value =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let unknown = unknown_keys(&value);
        if !unknown.is_empty() {
            return Err(HarnessError::Config(format!(
                "unknown configuration keys: {}",
                unknown.join(", ")
            )));
        }
        let cfg: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let p = &self.pools;
        let needed = p.calibration_users + p.attacker_users + p.victim_users;
        if needed > self.population.n_users {
            return Err(HarnessError::Config(format!(
                "pools need {needed} users but the population has {}",
                self.population.n_users
            )));
        }
        if p.calibration_users < 2 || p.attacker_users == 0 || p.victim_users == 0 {
            return Err(HarnessError::Config(
                "need at least two calibration users and one attacker and victim".into(),
            ));
        }
        if p.attacker_batch == 0 || p.attacker_batch > self.population.samples_per_user {
            return Err(HarnessError::Config(format!(
                "attacker_batch {} outside 1..={}",
                p.attacker_batch, self.population.samples_per_user
            )));
        }
        if self.population.d_in != self.extractor.d_in {
            return Err(HarnessError::Config(format!(
                "population d_in {} differs from extractor d_in {}",
                self.population.d_in, self.extractor.d_in
            )));
        }
        if self.mask.grid_rows * self.mask.grid_cols != self.population.d_in {
            return Err(HarnessError::Config(format!(
                "mask grid {}x{} does not cover d_in {}",
                self.mask.grid_rows, self.mask.grid_cols, self.population.d_in
            )));
        }
        if !(0.0..=100.0).contains(&self.detection.hypersphere_percentile) {
            return Err(HarnessError::Config(
                "hypersphere_percentile outside [0, 100]".into(),
            ));
        }
        self.generation.validate().map_err(HarnessError::from)?;
        self.attack.validate().map_err(HarnessError::from)?;
        Ok(())
    }
}

/// Every key of `value` that the configuration schema does not define, as
/// dotted paths.
pub fn unknown_keys(value: &toml::Value) -> Vec<String> {
    let mut full = ExperimentConfig::default();
    full.attack.fallback_step = Some(1);
    let known = toml::Value::try_from(&full).expect("configuration serializes");
    let mut out = Vec::new();
    collect_unknown(value, &known, "", &mut out);
    out
}

fn collect_unknown(value: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    match (value, known) {
        (toml::Value::Table(t), toml::Value::Table(k)) => {
            for (key, v) in t {
                let path = if prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{prefix}.{key}")
                };
                match k.get(key) {
                    Some(kv) => collect_unknown(v, kv, &path, out),
                    None => out.push(path),
                }
            }
        }
        (toml::Value::Array(items), toml::Value::Array(k)) => {
            if let Some(template) = k.first().filter(|t| t.is_table()) {
                for (i, v) in items.iter().enumerate() {
                    collect_unknown(v, template, &format!("{prefix}[{i}]"), out);
                }
            }
        }
        _ => {}
    }
}
