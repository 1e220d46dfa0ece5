//! Run manifest: configuration echo, seed, dataset fingerprint, tool
//! versions and the stages executed so far with digests of their outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use biobackdoor_core::feature_space::{DatasetMode, PopulationDataset};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::stages::Stage;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub format: u32,
    pub harness: String,
    pub core: String,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            format: FORMAT_VERSION,
            harness: env!("CARGO_PKG_VERSION").to_string(),
            core: biobackdoor_core::VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Unix seconds.
    pub completed_at: u64,
    /// SHA-256 of every file the stage wrote, keyed by run-relative path.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub versions: Versions,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub population_fingerprint: String,
    /// Unix seconds.
    pub created_at: u64,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig, dataset: &PopulationDataset) -> Self {
        Self {
            versions: Versions::default(),
            seed: config.seed,
            config: config.clone(),
            population_fingerprint: fingerprint(dataset),
            created_at: now(),
            stages: Vec::new(),
        }
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        crate::io::read_json(&run_dir.join(MANIFEST_FILE), "gen-data")
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        crate::io::write_json(&run_dir.join(MANIFEST_FILE), self)
    }

    /// Records a finished stage, hashing the listed run-relative files.
    pub fn record(&mut self, run_dir: &Path, stage: Stage, files: &[String]) -> Result<()> {
        let mut artifacts = BTreeMap::new();
        for f in files {
            artifacts.insert(f.clone(), file_digest(&run_dir.join(f))?);
        }
        self.stages.push(StageRecord {
            stage,
            completed_at: now(),
            artifacts,
        });
        Ok(())
    }
}

/// Current Unix time, or `SOURCE_DATE_EPOCH` when it is set, so that runs
/// can be made reproducible down to the manifest.
pub fn now() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
    {
        return t;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// SHA-256 over the exact bit patterns of every value in the dataset.
pub fn fingerprint(data: &PopulationDataset) -> String {
    let mut h = Sha256::new();
    h.update([match data.mode {
        DatasetMode::Raw => 0u8,
        DatasetMode::EmbeddingOnly => 1u8,
    }]);
    h.update((data.d_emb as u64).to_le_bytes());
    let vectors = |h: &mut Sha256, vs: &[Vec<f64>]| {
        h.update((vs.len() as u64).to_le_bytes());
        for v in vs {
            h.update((v.len() as u64).to_le_bytes());
            for x in v {
                h.update(x.to_bits().to_le_bytes());
            }
        }
    };
    for u in &data.users {
        h.update(u.id.to_le_bytes());
        for idx in [&u.train, &u.test] {
            h.update((idx.len() as u64).to_le_bytes());
            for &i in idx {
                h.update((i as u64).to_le_bytes());
            }
        }
        vectors(&mut h, &u.embeddings);
        vectors(&mut h, u.raw.as_deref().unwrap_or(&[]));
        vectors(&mut h, u.center.as_slice());
    }
    hex(&h.finalize())
}
