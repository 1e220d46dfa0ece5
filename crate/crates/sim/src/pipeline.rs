//! Experiment stages: world construction, threshold calibration, pair
//! sweeps, heuristic fitting, transfer surrogates and detection evaluation.

use biobackdoor_core::attack::{
    self, AttackMode, AttackResult, AttackScenario, HeuristicModel, HeuristicRecord,
};
use biobackdoor_core::defense::{self, SequenceLabel, UpdateSequence};
use biobackdoor_core::feature_space::{
    generate_synthetic_population, ExtractorSpec, FeatureExtractor, PerturbationMask,
    PopulationDataset, UserRecord,
};
use biobackdoor_core::linalg;
use biobackdoor_core::matchers::{
    self, EerPoint, MatcherKind, MatcherModel, Template, WeightScheme,
};
use biobackdoor_core::seed::{self, stream};
use biobackdoor_core::template_update::{AuthSystem, UpdatePolicy};
use biobackdoor_core::{Embedding, RawSample};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

/// User ids of the three disjoint pools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pools {
    pub calibration: Vec<u32>,
    pub attackers: Vec<u32>,
    pub victims: Vec<u32>,
}

impl Pools {
    /// Errors if any user belongs to more than one pool.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for id in self
            .calibration
            .iter()
            .chain(&self.attackers)
            .chain(&self.victims)
        {
            if !seen.insert(*id) {
                return Err(HarnessError::Config(format!(
                    "user {id} appears in more than one pool"
                )));
            }
        }
        Ok(())
    }
}

/// Dataset, extractor and mask shared by every stage.
#[derive(Debug, Clone)]
pub struct World {
    pub cfg: ExperimentConfig,
    pub extractor: FeatureExtractor,
    pub dataset: PopulationDataset,
    pub mask: PerturbationMask,
    pub pools: Pools,
}

pub fn build_extractor(cfg: &ExperimentConfig) -> Result<FeatureExtractor> {
    Ok(FeatureExtractor::random(&cfg.extractor, cfg.seed)?)
}

pub fn build_mask(cfg: &ExperimentConfig) -> Result<PerturbationMask> {
    Ok(PerturbationMask::block(
        cfg.population.d_in,
        cfg.mask.fraction,
        cfg.mask.offset,
        Some((cfg.mask.grid_rows, cfg.mask.grid_cols)),
    )?)
}

pub fn assign_pools(cfg: &ExperimentConfig, ids: &[u32]) -> Pools {
    let mut ids = ids.to_vec();
    ids.shuffle(&mut seed::rng_from(cfg.seed, &[stream::PAIRS, 0]));
    let p = &cfg.pools;
    let (cal, rest) = ids.split_at(p.calibration_users);
    let (att, rest) = rest.split_at(p.attacker_users);
    let vic = &rest[..p.victim_users];
    Pools {
        calibration: cal.to_vec(),
        attackers: att.to_vec(),
        victims: vic.to_vec(),
    }
}

impl World {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let extractor = build_extractor(cfg)?;
        let (dataset, _warnings) =
            generate_synthetic_population(&cfg.population, &extractor, cfg.seed)?;
        Self::from_parts(cfg, extractor, dataset)
    }

    pub fn from_parts(
        cfg: &ExperimentConfig,
        extractor: FeatureExtractor,
        dataset: PopulationDataset,
    ) -> Result<Self> {
        cfg.validate()?;
        let mask = build_mask(cfg)?;
        let pools = assign_pools(cfg, &dataset.user_ids());
        Ok(Self {
            cfg: cfg.clone(),
            extractor,
            dataset,
            mask,
            pools,
        })
    }

    pub fn user(&self, id: u32) -> Result<&UserRecord> {
        self.dataset
            .user(id)
            .ok_or_else(|| HarnessError::Config(format!("unknown user {id}")))
    }
}

/// Matcher arm under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub kind: MatcherKind,
    pub scheme: WeightScheme,
}

impl Arm {
    pub fn label(&self) -> String {
        match self.kind {
            MatcherKind::OcSvm { nu } => format!("svm(nu={nu})"),
            k => k.name().to_string(),
        }
    }

    /// File-name friendly identifier, e.g. `svm-nu0.5_sigmoid`.
    pub fn slug(&self) -> String {
        let kind = match self.kind {
            MatcherKind::OcSvm { nu } => format!("svm-nu{nu}"),
            k => k.name().to_string(),
        };
        format!("{kind}_{}", scheme_name(self.scheme))
    }
}

pub fn scheme_name(s: WeightScheme) -> &'static str {
    match s {
        WeightScheme::Flat => "flat",
        WeightScheme::Sigmoid => "sigmoid",
    }
}

/// EER calibration over the calibration pool: each user's template is built
/// from its enrolment split; genuine scores come from its own test split and
/// impostor scores from the other calibration users' test splits.
pub fn calibrate(world: &World, arm: Arm) -> Result<EerPoint> {
    calibrate_users(world, arm, &world.pools.calibration)
}

pub fn calibrate_users(world: &World, arm: Arm, users: &[u32]) -> Result<EerPoint> {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for &u in users {
        let rec = world.user(u)?;
        let template = Template::enrolled(rec.train_embeddings())?;
        let model = MatcherModel::fit(arm.kind, &template, arm.scheme)?;
        genuine.extend(
            rec.test_embeddings()
                .iter()
                .map(|e| model.score_unchecked(e)),
        );
        for &o in users.iter().filter(|&&o| o != u) {
            let other = world.user(o)?;
            impostor.extend(
                other
                    .test_embeddings()
                    .iter()
                    .map(|e| model.score_unchecked(e)),
            );
        }
    }
    Ok(matchers::calibrate_threshold_at_eer(&genuine, &impostor)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairAssignment {
    pub pair_id: usize,
    pub attacker_id: u32,
    pub victim_id: u32,
    pub seed: u64,
}

fn draw_pairs(
    cfg: &ExperimentConfig,
    attackers: &[u32],
    victims: &[u32],
    count: usize,
    salt: u64,
) -> Result<Vec<PairAssignment>> {
    let mut all: Vec<(u32, u32)> = attackers
        .iter()
        .flat_map(|&a| {
            victims
                .iter()
                .filter(move |&&v| v != a)
                .map(move |&v| (a, v))
        })
        .collect();
    if count > all.len() {
        return Err(HarnessError::Config(format!(
            "{count} pairs requested but only {} attacker-victim combinations exist",
            all.len()
        )));
    }
    all.shuffle(&mut seed::rng_from(cfg.seed, &[stream::PAIRS, salt]));
    Ok(all
        .into_iter()
        .take(count)
        .enumerate()
        .map(|(pair_id, (a, v))| PairAssignment {
            pair_id,
            attacker_id: a,
            victim_id: v,
            seed: seed::derive_seed(cfg.seed, &[stream::PAIRS, salt, a as u64, v as u64]),
        })
        .collect())
}

/// Attack pairs: attackers and victims from their own pools.
pub fn attack_pairs(world: &World) -> Result<Vec<PairAssignment>> {
    draw_pairs(
        &world.cfg,
        &world.pools.attackers,
        &world.pools.victims,
        world.cfg.pools.pairs,
        1,
    )
}

/// Heuristic-fitting pairs: victims come from the calibration pool, so no
/// attack victim is ever used.
pub fn heuristic_pairs(world: &World) -> Result<Vec<PairAssignment>> {
    draw_pairs(
        &world.cfg,
        &world.pools.attackers,
        &world.pools.calibration,
        world.cfg.pools.heuristic_pairs,
        2,
    )
}

/// The `n` samples closest to the user's mean raw sample.
pub fn low_noise_batch(user: &UserRecord, n: usize) -> Result<Vec<RawSample>> {
    let raw = user
        .raw
        .as_ref()
        .ok_or(biobackdoor_core::Error::UnsupportedMode(
            "attacks need raw samples",
        ))?;
    let mean = linalg::mean(raw.iter().map(Vec::as_slice));
    let mut idx: Vec<usize> = (0..raw.len()).collect();
    idx.sort_by(|&a, &b| {
        linalg::distance(&raw[a], &mean)
            .total_cmp(&linalg::distance(&raw[b], &mean))
            .then(a.cmp(&b))
    });
    Ok(idx.into_iter().take(n).map(|i| raw[i].clone()).collect())
}

/// Owned inputs of one attack run.
#[derive(Debug, Clone)]
pub struct PairData {
    pub batch: Vec<RawSample>,
    pub attacker_eval: Vec<Embedding>,
    pub victim_enrolment: Vec<Embedding>,
    pub victim_test: Vec<Embedding>,
    pub victim_test_raw: Vec<RawSample>,
    pub others: Vec<Embedding>,
}

impl PairData {
    pub fn new(world: &World, pair: &PairAssignment) -> Result<Self> {
        world.dataset.require_raw()?;
        let attacker = world.user(pair.attacker_id)?;
        let victim = world.user(pair.victim_id)?;
        let victim_raw = victim.raw.as_ref().expect("raw-mode dataset");
        let others = world
            .dataset
            .users
            .iter()
            .filter(|u| u.id != pair.attacker_id && u.id != pair.victim_id)
            .flat_map(|u| u.test_embeddings())
            .collect();
        Ok(Self {
            batch: low_noise_batch(attacker, world.cfg.pools.attacker_batch)?,
            attacker_eval: attacker.embeddings.clone(),
            victim_enrolment: victim.train_embeddings(),
            victim_test: victim.test_embeddings(),
            victim_test_raw: victim.test.iter().map(|&i| victim_raw[i].clone()).collect(),
            others,
        })
    }

    pub fn enrol(&self, arm: Arm, threshold: f64) -> Result<AuthSystem> {
        Ok(AuthSystem::enrol(
            arm.kind,
            arm.scheme,
            self.victim_enrolment.clone(),
            threshold,
            UpdatePolicy::default(),
        )?)
    }

    /// Victim test sample with the highest score; it must be accepted.
    pub fn known_victim_sample(&self, system: &AuthSystem) -> Result<&RawSample> {
        let best = self
            .victim_test
            .iter()
            .enumerate()
            .map(|(i, e)| (i, system.matcher().model.score_unchecked(e)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .ok_or(biobackdoor_core::Error::EmptySet("victim test"))?;
        Ok(&self.victim_test_raw[best])
    }
}

/// One finished attack with the victim system it left behind.
#[derive(Debug, Clone)]
pub struct PairRun {
    pub pair: PairAssignment,
    pub result: AttackResult,
    pub system: AuthSystem,
}

/// Runs one pair. `surrogate` switches to a transfer attack.
pub fn run_pair(
    world: &World,
    pair: &PairAssignment,
    arm: Arm,
    threshold: f64,
    mode: &AttackMode,
    surrogate: Option<&FeatureExtractor>,
) -> Result<PairRun> {
    let data = PairData::new(world, pair)?;
    let mut system = data.enrol(arm, threshold)?;
    let known = data.known_victim_sample(&system)?.clone();
    let scenario = AttackScenario {
        extractor: &world.extractor,
        mask: &world.mask,
        batch: &data.batch,
        attacker_eval: &data.attacker_eval,
        known_victim_sample: &known,
        victim_test: &data.victim_test,
        others: &data.others,
    };
    let gen = &world.cfg.generation;
    let cfg = &world.cfg.attack;
    let result = match surrogate {
        Some(s) => {
            attack::run_transfer_poisoning(s, &mut system, &scenario, cfg, gen, mode, pair.seed)?
        }
        None => attack::run_poisoning(&mut system, &scenario, cfg, gen, mode, pair.seed)?,
    };
    Ok(PairRun {
        pair: *pair,
        result,
        system,
    })
}

/// Rebuilds the system an attack left behind by re-enrolling the victim and
/// replaying the recorded injections.
pub fn restore_run(
    world: &World,
    pair: &PairAssignment,
    arm: Arm,
    threshold: f64,
    result: &AttackResult,
) -> Result<PairRun> {
    let data = PairData::new(world, pair)?;
    let mut system = data.enrol(arm, threshold)?;
    for e in &result.events {
        if !system.attempt_auth_and_update(&e.embedding)?.is_accepted() {
            return Err(HarnessError::Format(format!(
                "pair {}: recorded injection {} is not accepted on replay",
                pair.pair_id, e.rank
            )));
        }
    }
    Ok(PairRun {
        pair: *pair,
        result: result.clone(),
        system,
    })
}

/// Runs every pair on the rayon pool; results keep pair order.
pub fn sweep(
    world: &World,
    pairs: &[PairAssignment],
    arm: Arm,
    threshold: f64,
    mode: &AttackMode,
    surrogate: Option<&FeatureExtractor>,
) -> Result<Vec<PairRun>> {
    pairs
        .par_iter()
        .map(|p| run_pair(world, p, arm, threshold, mode, surrogate))
        .collect()
}

/// Oracle runs on the heuristic pairs; the probed steps become records.
pub fn collect_heuristic_records(
    world: &World,
    arm: Arm,
    threshold: f64,
) -> Result<Vec<HeuristicRecord>> {
    let pairs = heuristic_pairs(world)?;
    let runs = sweep(world, &pairs, arm, threshold, &AttackMode::Oracle, None)?;
    Ok(runs
        .into_iter()
        .flat_map(|r| r.result.heuristic_records)
        .collect())
}

pub fn fit_heuristic(world: &World, arm: Arm, threshold: f64) -> Result<HeuristicModel> {
    let records = collect_heuristic_records(world, arm, threshold)?;
    Ok(attack::fit_heuristic(&records)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// Same architecture, independent random weights.
    IndependentSeed,
    /// Different hidden widths and weights.
    UnrelatedArchitecture,
    /// Target weights with additive Gaussian noise.
    Related,
}

impl SurrogateKind {
    pub const ALL: [SurrogateKind; 3] = [
        SurrogateKind::IndependentSeed,
        SurrogateKind::UnrelatedArchitecture,
        SurrogateKind::Related,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SurrogateKind::IndependentSeed => "independent_seed",
            SurrogateKind::UnrelatedArchitecture => "unrelated_architecture",
            SurrogateKind::Related => "related",
        }
    }
}

pub fn build_surrogate(world: &World, kind: SurrogateKind) -> Result<FeatureExtractor> {
    let cfg = &world.cfg;
    match kind {
        SurrogateKind::IndependentSeed => Ok(FeatureExtractor::random(
            &cfg.extractor,
            seed::derive_seed(cfg.seed, &[stream::SURROGATE, 1]),
        )?),
        SurrogateKind::UnrelatedArchitecture => {
            let spec = ExtractorSpec {
                hidden: cfg.transfer.unrelated_hidden.clone(),
                ..cfg.extractor.clone()
            };
            Ok(FeatureExtractor::random(
                &spec,
                seed::derive_seed(cfg.seed, &[stream::SURROGATE, 2]),
            )?)
        }
        SurrogateKind::Related => {
            let seed = seed::derive_seed(cfg.seed, &[stream::SURROGATE, 3]);
            let mut rng = seed::rng_from(seed, &[]);
            let mut layers = world.extractor.layers().to_vec();
            for l in &mut layers {
                for w in l.weights.data.iter_mut().chain(l.bias.iter_mut()) {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *w += cfg.transfer.related_noise * g;
                }
            }
            Ok(FeatureExtractor::new(
                layers,
                world.extractor.l2_normalize(),
                seed,
            )?)
        }
    }
}

/// Update sequence of the samples an attack injected.
pub fn poisoning_sequence(run: &PairRun) -> UpdateSequence {
    UpdateSequence {
        label: SequenceLabel::Poisoning,
        user_id: run.pair.victim_id,
        embeddings: run
            .result
            .events
            .iter()
            .map(|e| e.embedding.clone())
            .collect(),
    }
}

/// Enrolment centroid (flat) of a user.
pub fn enrolment_centroid(world: &World, user: u32) -> Result<Embedding> {
    let rec = world.user(user)?;
    let train = rec.train_embeddings();
    Ok(linalg::mean(train.iter().map(Vec::as_slice)))
}

pub fn legitimate_sequences(world: &World) -> Result<Vec<UpdateSequence>> {
    Ok(defense::generate_variation_sequences(
        &world.dataset,
        &world.extractor,
        &world.pools.victims,
        &world.cfg.detection.variation,
        world.cfg.seed,
    )?)
}

/// Consecutive-pair cosines of `seq` against the owner's evolving centroid.
pub fn sequence_cosines(world: &World, seq: &UpdateSequence) -> Result<Vec<f64>> {
    let c = enrolment_centroid(world, seq.user_id)?;
    let n = world.cfg.population.enrolment_size;
    Ok(defense::pair_cosines(&seq.embeddings, &c, n)?
        .into_iter()
        .flatten()
        .collect())
}

/// Linear-interpolated percentile (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}
