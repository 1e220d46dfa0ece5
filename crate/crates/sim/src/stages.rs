//! Pipeline stages over a run directory. Every stage reads the artifacts of
//! earlier stages, writes its own files and appends itself to the manifest.
//!
//! Layout of a run directory:
//!
//! ```text
//! manifest.json
//! config.toml
//! data/{extractor.json,population.json,embeddings.csv}
//! calibration/thresholds.json
//! heuristic/<arm>.json
//! attacks/<arm>_<mode>/{attack.json,results.jsonl,update_logs.jsonl,metrics.csv}
//! detect/<detector>_<arm>_<mode>/{summary.json,reports.jsonl}
//! report/{success_table.csv,metrics.csv,trajectories.json}
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use biobackdoor_core::attack::{
    AttackConfig, AttackMode, AttackResult, GenerationConfig, HeuristicModel, HeuristicRecord,
};
use biobackdoor_core::feature_space::{FeatureExtractor, PopulationDataset};
use biobackdoor_core::matchers::EerPoint;
use biobackdoor_core::metrics::{self, GroupKey, DEFAULT_CHECKPOINTS};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::experiments;
use crate::io;
use crate::manifest::{self, Manifest};
use crate::pipeline::{self, Arm, PairAssignment, PairRun, SurrogateKind, World};

pub const CONFIG_FILE: &str = "config.toml";
pub const EXTRACTOR_FILE: &str = "data/extractor.json";
pub const POPULATION_FILE: &str = "data/population.json";
pub const EMBEDDINGS_FILE: &str = "data/embeddings.csv";
pub const THRESHOLDS_FILE: &str = "calibration/thresholds.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    Heuristic,
    Oracle,
    /// Heuristic mode with generation on a surrogate extractor.
    Transfer,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DetectorChoice {
    Cosine,
    Hypersphere,
}

/// One executed pipeline command, as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Stage {
    GenData {
        embeddings: Option<PathBuf>,
    },
    Calibrate {
        arm: Arm,
    },
    FitHeuristic {
        arm: Arm,
        pairs: Option<usize>,
    },
    Attack {
        arm: Arm,
        mode: ModeChoice,
        surrogate: Option<SurrogateKind>,
        pairs: Option<usize>,
    },
    Detect {
        detector: DetectorChoice,
        arm: Arm,
        mode: ModeChoice,
        surrogate: Option<SurrogateKind>,
    },
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub arm: Arm,
    pub threshold: f64,
    pub eer: f64,
    pub far: f64,
    pub frr: f64,
    pub calibration_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicFit {
    pub arm: Arm,
    pub threshold: f64,
    pub pairs: Vec<PairAssignment>,
    pub records: Vec<HeuristicRecord>,
    pub model: HeuristicModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMeta {
    pub arm: Arm,
    pub mode: ModeChoice,
    pub surrogate: Option<SurrogateKind>,
    pub threshold: f64,
    pub seed: u64,
    pub attack: AttackConfig,
    pub generation: GenerationConfig,
    pub pairs: usize,
}

impl AttackMeta {
    pub fn group_key(&self) -> GroupKey {
        GroupKey {
            matcher: self.arm.label(),
            weighting: pipeline::scheme_name(self.arm.scheme).to_string(),
            mode: mode_label(self.mode, self.surrogate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub pair: PairAssignment,
    pub result: AttackResult,
}

pub fn mode_label(mode: ModeChoice, surrogate: Option<SurrogateKind>) -> String {
    match (mode, surrogate) {
        (ModeChoice::Transfer, Some(s)) => format!("transfer-{}", s.name()),
        (ModeChoice::Transfer, None) => "transfer".to_string(),
        (ModeChoice::Heuristic, _) => "heuristic".to_string(),
        (ModeChoice::Oracle, _) => "oracle".to_string(),
        (ModeChoice::Iterative, _) => "iterative".to_string(),
    }
}

pub fn attack_dir(arm: Arm, mode: ModeChoice, surrogate: Option<SurrogateKind>) -> String {
    format!("attacks/{}_{}", arm.slug(), mode_label(mode, surrogate))
}

fn heuristic_file(arm: Arm) -> String {
    format!("heuristic/{}.json", arm.slug())
}

/// Surrogate used by a transfer attack; independent-seed unless chosen.
pub fn effective_surrogate(
    mode: ModeChoice,
    surrogate: Option<SurrogateKind>,
) -> Option<SurrogateKind> {
    match mode {
        ModeChoice::Transfer => Some(surrogate.unwrap_or(SurrogateKind::IndependentSeed)),
        _ => None,
    }
}

/// A run directory on disk.
#[derive(Debug, Clone)]
pub struct Run {
    pub root: PathBuf,
}

impl Run {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Manifest::load(&self.root)
    }

    /// Loads the dataset and extractor, checking the dataset fingerprint.
    pub fn world(&self, manifest: &Manifest) -> Result<World> {
        let extractor: FeatureExtractor = io::read_json(&self.path(EXTRACTOR_FILE), "gen-data")?;
        let dataset: PopulationDataset = io::read_json(&self.path(POPULATION_FILE), "gen-data")?;
        if manifest::fingerprint(&dataset) != manifest.population_fingerprint {
            return Err(HarnessError::Format(format!(
                "{} does not match the manifest fingerprint",
                self.path(POPULATION_FILE).display()
            )));
        }
        World::from_parts(&manifest.config, extractor, dataset)
    }

    pub fn thresholds(&self) -> Result<BTreeMap<String, Calibration>> {
        io::read_json(&self.path(THRESHOLDS_FILE), "calibrate")
    }

    pub fn threshold(&self, arm: Arm) -> Result<f64> {
        self.thresholds()?
            .get(&arm.slug())
            .map(|c| c.threshold)
            .ok_or_else(|| HarnessError::MissingArtifact {
                path: self.path(THRESHOLDS_FILE),
                command: "calibrate",
            })
    }

    pub fn heuristic(&self, arm: Arm) -> Result<HeuristicFit> {
        io::read_json(&self.path(&heuristic_file(arm)), "fit-heuristic")
    }

    /// Reads an attack directory and rebuilds the post-attack systems.
    pub fn attack_runs(&self, world: &World, dir: &str) -> Result<(AttackMeta, Vec<PairRun>)> {
        let meta: AttackMeta = io::read_json(&self.path(&format!("{dir}/attack.json")), "attack")?;
        let records: Vec<AttackRecord> =
            io::read_jsonl(&self.path(&format!("{dir}/results.jsonl")), "attack")?;
        let runs = records
            .iter()
            .map(|r| pipeline::restore_run(world, &r.pair, meta.arm, meta.threshold, &r.result))
            .collect::<Result<Vec<_>>>()?;
        Ok((meta, runs))
    }

    /// Attack directories present, sorted by name.
    pub fn attack_dirs(&self) -> Result<Vec<String>> {
        let base = self.path("attacks");
        let entries = match std::fs::read_dir(&base) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(HarnessError::io(&base, e)),
        };
        let mut dirs = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| HarnessError::io(&base, e))?;
            if entry.path().join("attack.json").is_file() {
                dirs.push(format!("attacks/{}", entry.file_name().to_string_lossy()));
            }
        }
        dirs.sort();
        Ok(dirs)
    }
}

/// Creates a new run directory: configuration echo, dataset, extractor and
/// a fresh manifest.
pub fn gen_data(
    root: &Path,
    cfg: &ExperimentConfig,
    embeddings: Option<&Path>,
) -> Result<Vec<String>> {
    let run = Run::new(root);
    if run.path(manifest::MANIFEST_FILE).exists() {
        return Err(HarnessError::Config(format!(
            "{} already holds a run; choose a new --out directory",
            root.display()
        )));
    }
    let mut cfg = cfg.clone();
    let extractor = pipeline::build_extractor(&cfg)?;
    let dataset = match embeddings {
        Some(path) => {
            let data = io::read_embeddings_csv(path)?;
            cfg.population.n_users = data.users.len();
            data
        }
        None => {
            let (data, warnings) = biobackdoor_core::feature_space::generate_synthetic_population(
                &cfg.population,
                &extractor,
                cfg.seed,
            )?;
            for w in warnings {
                eprintln!("warning: {w:?}");
            }
            data
        }
    };
    cfg.validate()?;
    io::write_text(&run.path(CONFIG_FILE), &cfg.to_toml_string())?;
    io::write_json(&run.path(EXTRACTOR_FILE), &extractor)?;
    io::write_json(&run.path(POPULATION_FILE), &dataset)?;
    io::write_embeddings_csv(&run.path(EMBEDDINGS_FILE), &dataset)?;
    let files = vec![
        CONFIG_FILE.to_string(),
        EXTRACTOR_FILE.to_string(),
        POPULATION_FILE.to_string(),
        EMBEDDINGS_FILE.to_string(),
    ];
    let mut m = Manifest::new(&cfg, &dataset);
    m.record(
        root,
        Stage::GenData {
            embeddings: embeddings.map(Path::to_path_buf),
        },
        &files,
    )?;
    m.save(root)?;
    Ok(files)
}

/// Runs any stage after `gen-data` and records it in the manifest.
pub fn execute(root: &Path, stage: &Stage) -> Result<Vec<String>> {
    let run = Run::new(root);
    let mut m = run.manifest()?;
    let files = match stage {
        Stage::GenData { .. } => {
            return Err(HarnessError::Config(
                "gen-data starts a new run directory".into(),
            ))
        }
        Stage::Calibrate { arm } => calibrate(&run, &m, *arm)?,
        Stage::FitHeuristic { arm, pairs } => fit_heuristic(&run, &m, *arm, *pairs)?,
        Stage::Attack {
            arm,
            mode,
            surrogate,
            pairs,
        } => attack(&run, &m, *arm, *mode, *surrogate, *pairs)?,
        Stage::Detect {
            detector,
            arm,
            mode,
            surrogate,
        } => detect(&run, &m, *detector, *arm, *mode, *surrogate)?,
        Stage::Report => report(&run)?,
    };
    m.record(root, stage.clone(), &files)?;
    m.save(root)?;
    Ok(files)
}

fn calibrate(run: &Run, m: &Manifest, arm: Arm) -> Result<Vec<String>> {
    let world = run.world(m)?;
    world.pools.check_disjoint()?;
    let EerPoint {
        threshold,
        eer,
        far,
        frr,
    } = pipeline::calibrate(&world, arm)?;
    let mut table = match run.thresholds() {
        Ok(t) => t,
        Err(HarnessError::MissingArtifact { .. }) => BTreeMap::new(),
        Err(e) => return Err(e),
    };
    table.insert(
        arm.slug(),
        Calibration {
            arm,
            threshold,
            eer,
            far,
            frr,
            calibration_users: world.pools.calibration.len(),
        },
    );
    io::write_json(&run.path(THRESHOLDS_FILE), &table)?;
    Ok(vec![THRESHOLDS_FILE.to_string()])
}

fn with_pairs(world: &mut World, attack: Option<usize>, heuristic: Option<usize>) {
    if let Some(n) = attack {
        world.cfg.pools.pairs = n;
    }
    if let Some(n) = heuristic {
        world.cfg.pools.heuristic_pairs = n;
    }
}

fn fit_heuristic(run: &Run, m: &Manifest, arm: Arm, pairs: Option<usize>) -> Result<Vec<String>> {
    let mut world = run.world(m)?;
    world.dataset.require_raw()?;
    with_pairs(&mut world, None, pairs);
    let threshold = run.threshold(arm)?;
    let records = pipeline::collect_heuristic_records(&world, arm, threshold)?;
    let model = biobackdoor_core::attack::fit_heuristic(&records)?;
    let fit = HeuristicFit {
        arm,
        threshold,
        pairs: pipeline::heuristic_pairs(&world)?,
        records,
        model,
    };
    let file = heuristic_file(arm);
    io::write_json(&run.path(&file), &fit)?;
    Ok(vec![file])
}

fn attack(
    run: &Run,
    m: &Manifest,
    arm: Arm,
    mode: ModeChoice,
    surrogate: Option<SurrogateKind>,
    pairs: Option<usize>,
) -> Result<Vec<String>> {
    let mut world = run.world(m)?;
    world.dataset.require_raw()?;
    with_pairs(&mut world, pairs, None);
    let threshold = run.threshold(arm)?;
    let surrogate = effective_surrogate(mode, surrogate);
    let attack_mode = match mode {
        ModeChoice::Oracle => AttackMode::Oracle,
        ModeChoice::Iterative => AttackMode::Iterative,
        ModeChoice::Heuristic | ModeChoice::Transfer => AttackMode::Heuristic {
            model: run.heuristic(arm)?.model,
        },
    };
    let surrogate_f = surrogate
        .map(|k| pipeline::build_surrogate(&world, k))
        .transpose()?;
    let assignments = pipeline::attack_pairs(&world)?;
    let runs = pipeline::sweep(
        &world,
        &assignments,
        arm,
        threshold,
        &attack_mode,
        surrogate_f.as_ref(),
    )?;
    let meta = AttackMeta {
        arm,
        mode,
        surrogate,
        threshold,
        seed: world.cfg.seed,
        attack: world.cfg.attack,
        generation: world.cfg.generation.clone(),
        pairs: assignments.len(),
    };
    let key = meta.group_key();
    let dir = attack_dir(arm, mode, surrogate);
    let records: Vec<AttackRecord> = runs
        .iter()
        .map(|r| AttackRecord {
            pair: r.pair,
            result: r.result.clone(),
        })
        .collect();
    let logs: Vec<io::UpdateLogLine> = runs
        .iter()
        .flat_map(|r| io::update_log_lines(r.pair.pair_id, r.system.log()))
        .collect();
    let rows: Vec<io::MetricsRow> = runs
        .iter()
        .flat_map(|r| io::metrics_rows(r.pair.pair_id, &key, &r.result))
        .collect();
    let files = [
        format!("{dir}/attack.json"),
        format!("{dir}/results.jsonl"),
        format!("{dir}/update_logs.jsonl"),
        format!("{dir}/metrics.csv"),
    ];
    io::write_json(&run.path(&files[0]), &meta)?;
    io::write_jsonl(&run.path(&files[1]), &records)?;
    io::write_jsonl(&run.path(&files[2]), &logs)?;
    io::write_metrics_csv(&run.path(&files[3]), &rows)?;
    Ok(files.to_vec())
}

fn detect(
    run: &Run,
    m: &Manifest,
    detector: DetectorChoice,
    arm: Arm,
    mode: ModeChoice,
    surrogate: Option<SurrogateKind>,
) -> Result<Vec<String>> {
    let world = run.world(m)?;
    world.dataset.require_raw()?;
    let surrogate = effective_surrogate(mode, surrogate);
    let source = attack_dir(arm, mode, surrogate);
    let (_, runs) = run.attack_runs(&world, &source)?;
    let name = match detector {
        DetectorChoice::Cosine => "cosine",
        DetectorChoice::Hypersphere => "hypersphere",
    };
    let dir = format!("detect/{name}_{}", source.trim_start_matches("attacks/"));
    let files = [
        format!("{dir}/summary.json"),
        format!("{dir}/reports.jsonl"),
    ];
    match detector {
        DetectorChoice::Cosine => {
            let d = experiments::cosine_detection(&world, &runs)?;
            io::write_json(&run.path(&files[0]), &d.summary)?;
            io::write_jsonl(&run.path(&files[1]), &d.reports)?;
        }
        DetectorChoice::Hypersphere => {
            let d = experiments::hypersphere_detection(&world, &runs)?;
            io::write_json(&run.path(&files[0]), &d.summary)?;
            io::write_jsonl(&run.path(&files[1]), &d.verdicts)?;
        }
    }
    Ok(files.to_vec())
}

pub const SUCCESS_TABLE_FILE: &str = "report/success_table.csv";
pub const REPORT_METRICS_FILE: &str = "report/metrics.csv";
pub const TRAJECTORIES_FILE: &str = "report/trajectories.json";

/// Aggregates every attack directory of the run.
fn report(run: &Run) -> Result<Vec<String>> {
    let dirs = run.attack_dirs()?;
    if dirs.is_empty() {
        return Err(HarnessError::MissingArtifact {
            path: run.path("attacks"),
            command: "attack",
        });
    }
    let mut results = Vec::new();
    let mut rows = Vec::new();
    for dir in &dirs {
        let meta: AttackMeta = io::read_json(&run.path(&format!("{dir}/attack.json")), "attack")?;
        let records: Vec<AttackRecord> =
            io::read_jsonl(&run.path(&format!("{dir}/results.jsonl")), "attack")?;
        let key = meta.group_key();
        for r in records {
            rows.extend(io::metrics_rows(r.pair.pair_id, &key, &r.result));
            results.push((key.clone(), r.result));
        }
    }
    let refs: Vec<(GroupKey, &AttackResult)> =
        results.iter().map(|(k, r)| (k.clone(), r)).collect();
    let agg = metrics::aggregate(&refs, &DEFAULT_CHECKPOINTS);
    io::write_success_csv(&run.path(SUCCESS_TABLE_FILE), &agg.table)?;
    io::write_metrics_csv(&run.path(REPORT_METRICS_FILE), &rows)?;
    io::write_json(&run.path(TRAJECTORIES_FILE), &agg.trajectories)?;
    Ok(vec![
        SUCCESS_TABLE_FILE.to_string(),
        REPORT_METRICS_FILE.to_string(),
        TRAJECTORIES_FILE.to_string(),
    ])
}

/// Re-executes the stages of `manifest` into a new run directory.
pub fn replay(manifest: &Manifest, root: &Path) -> Result<()> {
    let mut stages = manifest.stages.iter();
    match stages.next().map(|s| &s.stage) {
        Some(Stage::GenData { embeddings }) => {
            gen_data(root, &manifest.config, embeddings.as_deref())?;
        }
        _ => {
            return Err(HarnessError::Format(
                "manifest does not start with gen-data".into(),
            ))
        }
    }
    for s in stages {
        execute(root, &s.stage)?;
    }
    Ok(())
}
