//! Higher-level experiments built on the pipeline stages: ν sweeps, heuristic
//! versus iterative injection, transfer gaps and cosine detection.

use biobackdoor_core::attack::{AttackMode, AttackResult};
use biobackdoor_core::defense::{self, DetectionReport, DetectorConfig, HypersphereVerdict};
use biobackdoor_core::feature_space::FeatureExtractor;
use biobackdoor_core::matchers::{EerPoint, MatcherKind, WeightScheme};
use biobackdoor_core::metrics::{self, success_at};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pipeline::{self, Arm, PairAssignment, PairRun, SurrogateKind, World};

pub const CENTROID_FLAT: Arm = Arm {
    kind: MatcherKind::Centroid,
    scheme: WeightScheme::Flat,
};

/// Injections needed to succeed; failed runs count as `censor`.
pub fn injections_or(r: &AttackResult, censor: usize) -> usize {
    r.injections_to_success().unwrap_or(censor)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

pub fn success_rate(runs: &[PairRun], injections: usize) -> f64 {
    if runs.is_empty() {
        return 0.0;
    }
    runs.iter()
        .filter(|r| success_at(&r.result, injections))
        .count() as f64
        / runs.len() as f64
}

/// Calibrates `arm` and runs every attack pair in `mode`.
pub fn run_arm(
    world: &World,
    pairs: &[PairAssignment],
    arm: Arm,
    mode: &AttackMode,
) -> Result<(EerPoint, Vec<PairRun>)> {
    let eer = pipeline::calibrate(world, arm)?;
    let runs = pipeline::sweep(world, pairs, arm, eer.threshold, mode, None)?;
    Ok((eer, runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuPoint {
    pub nu: f64,
    pub median_injections: f64,
    pub success_rate: f64,
}

/// Oracle-mode median injections-to-success of the ν-SVM matcher for each
/// `nu`; failed runs are censored at `max_injection_attempts + 1`.
pub fn nu_sweep(world: &World, pairs: &[PairAssignment], nus: &[f64]) -> Result<Vec<NuPoint>> {
    let censor = world.cfg.attack.max_injection_attempts + 1;
    nus.iter()
        .map(|&nu| {
            let arm = Arm {
                kind: MatcherKind::OcSvm { nu },
                scheme: WeightScheme::Flat,
            };
            let (_, runs) = run_arm(world, pairs, arm, &AttackMode::Oracle)?;
            let counts: Vec<f64> = runs
                .iter()
                .map(|r| injections_or(&r.result, censor) as f64)
                .collect();
            Ok(NuPoint {
                nu,
                median_injections: median(&counts).unwrap_or(f64::NAN),
                success_rate: runs.iter().filter(|r| r.result.success).count() as f64
                    / runs.len().max(1) as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionEfficiency {
    pub accepted: usize,
    pub failures: usize,
    /// Failed attempts per accepted injection.
    pub failures_per_injection: f64,
    /// Share of accepted injections whose first attempted step was accepted.
    pub first_pick_acceptance: f64,
}

pub fn injection_efficiency(runs: &[PairRun]) -> InjectionEfficiency {
    let accepted: usize = runs.iter().map(|r| r.result.injections_accepted).sum();
    let failures: usize = runs.iter().map(|r| r.result.failures).sum();
    let first: usize = runs
        .iter()
        .flat_map(|r| &r.result.events)
        .filter(|e| e.first_pick_accepted())
        .count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    InjectionEfficiency {
        accepted,
        failures,
        failures_per_injection: ratio(failures, accepted),
        first_pick_acceptance: ratio(first, accepted),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicComparison {
    pub heuristic: InjectionEfficiency,
    pub iterative: InjectionEfficiency,
}

/// Fits the heuristic on the heuristic pairs, then attacks the attack pairs
/// with it and with the plain iterative search.
pub fn heuristic_comparison(
    world: &World,
    pairs: &[PairAssignment],
    arm: Arm,
) -> Result<HeuristicComparison> {
    let eer = pipeline::calibrate(world, arm)?;
    let model = pipeline::fit_heuristic(world, arm, eer.threshold)?;
    let heuristic = pipeline::sweep(
        world,
        pairs,
        arm,
        eer.threshold,
        &AttackMode::Heuristic { model },
        None,
    )?;
    let iterative = pipeline::sweep(
        world,
        pairs,
        arm,
        eer.threshold,
        &AttackMode::Iterative,
        None,
    )?;
    Ok(HeuristicComparison {
        heuristic: injection_efficiency(&heuristic),
        iterative: injection_efficiency(&iterative),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPoint {
    pub surrogate: SurrogateKind,
    pub success_at_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferGap {
    pub same_model_success_at_10: f64,
    pub surrogates: Vec<TransferPoint>,
}

/// Heuristic-mode success@10 with generation on the target extractor and on
/// each surrogate. The heuristic itself is always fitted on the target system.
pub fn transfer_gap(world: &World, pairs: &[PairAssignment], arm: Arm) -> Result<TransferGap> {
    let eer = pipeline::calibrate(world, arm)?;
    let mode = AttackMode::Heuristic {
        model: pipeline::fit_heuristic(world, arm, eer.threshold)?,
    };
    let run = |surrogate: Option<&FeatureExtractor>| -> Result<f64> {
        let runs = pipeline::sweep(world, pairs, arm, eer.threshold, &mode, surrogate)?;
        Ok(success_rate(&runs, 10))
    };
    let same = run(None)?;
    let surrogates = SurrogateKind::ALL
        .iter()
        .map(|&kind| {
            let s = pipeline::build_surrogate(world, kind)?;
            Ok(TransferPoint {
                surrogate: kind,
                success_at_10: run(Some(&s))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferGap {
        same_model_success_at_10: same,
        surrogates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub calibration: EerPoint,
    pub legitimate_pairs: usize,
    pub poisoning_pairs: usize,
    /// Poisoning runs with at least one accepted injection.
    pub runs: usize,
    /// Runs alarmed by the second injection while the attacker IAR was still
    /// below `theta1`.
    pub early_alarms: usize,
    pub early_alarm_rate: f64,
    /// Alarmed runs whose rollback brought the IAR back to its baseline
    /// within one attacker sample.
    pub rollbacks_restored: usize,
    pub rollbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub pair_id: usize,
    pub report: DetectionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineDetection {
    pub summary: DetectionSummary,
    pub reports: Vec<RunReport>,
}

/// Calibrates the cosine detector on legitimate variation sequences against
/// the poisoning sequences of `runs`, then replays each run through it.
pub fn cosine_detection(world: &World, runs: &[PairRun]) -> Result<CosineDetection> {
    let n = world.cfg.population.enrolment_size;
    let mut legit = Vec::new();
    for seq in pipeline::legitimate_sequences(world)? {
        legit.extend(pipeline::sequence_cosines(world, &seq)?);
    }
    let mut poison = Vec::new();
    let sequences: Vec<_> = runs
        .iter()
        .filter(|r| r.result.injections_accepted > 0)
        .map(|r| (r, pipeline::poisoning_sequence(r)))
        .collect();
    for (_, seq) in &sequences {
        poison.extend(pipeline::sequence_cosines(world, seq)?);
    }
    let calibration = defense::calibrate_detector(&legit, &poison)?;
    let cfg = DetectorConfig {
        cos_threshold: calibration.threshold,
        consecutive_flags_to_alarm: world.cfg.detection.consecutive_flags_to_alarm,
    };
    let theta1 = world.cfg.attack.theta1;
    let mut early = 0;
    let mut restored = 0;
    let mut rollbacks = 0;
    let mut reports = Vec::new();
    for (run, seq) in &sequences {
        if seq.embeddings.len() < 2 {
            continue;
        }
        let centroid = pipeline::enrolment_centroid(world, seq.user_id)?;
        let report = defense::detect(seq, &centroid, n, &cfg)?;
        let alarm = report.alarm_index;
        reports.push(RunReport {
            pair_id: run.pair.pair_id,
            report,
        });
        let Some(idx) = alarm else {
            continue;
        };
        if idx <= 1 && run.result.iar_trajectory[idx + 1] < theta1 {
            early += 1;
        }
        let mut system = run.system.clone();
        system.rollback(run.result.injections_accepted)?;
        let data = pipeline::PairData::new(world, &run.pair)?;
        let snap = metrics::snapshot_rates(
            system.matcher(),
            &data.victim_test,
            &data.attacker_eval,
            &data.others,
        )?;
        rollbacks += 1;
        let granularity = 1.0 / data.attacker_eval.len() as f64;
        if (snap.iar - run.result.iar_trajectory[0]).abs() <= granularity + 1e-12 {
            restored += 1;
        }
    }
    let summary = DetectionSummary {
        calibration,
        legitimate_pairs: legit.len(),
        poisoning_pairs: poison.len(),
        runs: sequences.len(),
        early_alarms: early,
        early_alarm_rate: if sequences.is_empty() {
            0.0
        } else {
            early as f64 / sequences.len() as f64
        },
        rollbacks_restored: restored,
        rollbacks,
    };
    Ok(CosineDetection { summary, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypersphereSummary {
    pub k: usize,
    /// Percentile of the legitimate window drifts used as the radius.
    pub percentile: f64,
    pub radius: f64,
    pub legitimate_sequences: usize,
    pub legitimate_reverted: usize,
    pub poisoning_runs: usize,
    pub poisoning_reverted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunVerdict {
    pub pair_id: usize,
    pub verdict: HypersphereVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypersphereDetection {
    pub summary: HypersphereSummary,
    pub verdicts: Vec<RunVerdict>,
}

/// Sanitization hypersphere with its radius set from the legitimate
/// sequences' largest window drifts, applied to the poisoning runs.
pub fn hypersphere_detection(world: &World, runs: &[PairRun]) -> Result<HypersphereDetection> {
    let n = world.cfg.population.enrolment_size;
    let k = world.cfg.detection.hypersphere_k;
    let q = world.cfg.detection.hypersphere_percentile;
    let legit = pipeline::legitimate_sequences(world)?;
    let mut drifts = Vec::with_capacity(legit.len());
    for seq in &legit {
        let c = pipeline::enrolment_centroid(world, seq.user_id)?;
        let updates: Vec<&[f64]> = seq.embeddings.iter().map(Vec::as_slice).collect();
        drifts.push(defense::max_window_drift(&updates, &c, n, k));
    }
    let radius = pipeline::percentile(&drifts, q)
        .ok_or(biobackdoor_core::Error::EmptySet("legitimate sequences"))?;
    let mut legit_reverted = 0;
    for seq in &legit {
        let c = pipeline::enrolment_centroid(world, seq.user_id)?;
        let updates: Vec<&[f64]> = seq.embeddings.iter().map(Vec::as_slice).collect();
        if defense::sanitize_hypersphere(&updates, &c, n, k, radius)?
            .revert_at
            .is_some()
        {
            legit_reverted += 1;
        }
    }
    let mut verdicts = Vec::new();
    for run in runs.iter().filter(|r| r.result.injections_accepted > 0) {
        let c = pipeline::enrolment_centroid(world, run.pair.victim_id)?;
        let updates: Vec<&[f64]> = run
            .result
            .events
            .iter()
            .map(|e| e.embedding.as_slice())
            .collect();
        verdicts.push(RunVerdict {
            pair_id: run.pair.pair_id,
            verdict: defense::sanitize_hypersphere(&updates, &c, n, k, radius)?,
        });
    }
    let summary = HypersphereSummary {
        k,
        percentile: q,
        radius,
        legitimate_sequences: legit.len(),
        legitimate_reverted: legit_reverted,
        poisoning_runs: verdicts.len(),
        poisoning_reverted: verdicts
            .iter()
            .filter(|v| v.verdict.revert_at.is_some())
            .count(),
    };
    Ok(HypersphereDetection { summary, verdicts })
}
