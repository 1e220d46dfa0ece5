//! Poisoning sample generation, the injection heuristic and the poisoning
//! loop against a self-updating victim system.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::feature_space::{self, apply_perturbation, FeatureExtractor, PerturbationMask};
use crate::linalg;
use crate::metrics::{self, RateSnapshot};
use crate::seed::{self, stream, SimRng};
use crate::template_update::AuthSystem;
use crate::{Embedding, Error, RawSample, Result};

/// Neighbourhood used by the total-variation penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TvTopology {
    Chain,
    Grid { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    /// Step size applied to every selected coordinate.
    pub lambda: f64,
    /// Coordinates updated per step.
    pub top_m: usize,
    /// Steps per phase (`N`).
    pub iterations: usize,
    /// Norm order of the distance objective.
    pub p: f64,
    /// Printable values for the non-printability score.
    pub palette: Vec<f64>,
    pub tv_topology: TvTopology,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            lambda: 4.0 / 255.0,
            top_m: 2,
            iterations: 120,
            p: 2.0,
            palette: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            tv_topology: TvTopology::Grid { rows: 8, cols: 8 },
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda {} must be positive",
                self.lambda
            )));
        }
        if self.top_m == 0 {
            return Err(Error::InvalidConfig("top_m must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.p >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "norm order {} must be >= 1",
                self.p
            )));
        }
        if self.palette.is_empty() {
            return Err(Error::InvalidConfig("palette must not be empty".into()));
        }
        Ok(())
    }
}

/// Total variation of `delta`. On a grid, missing right/down neighbours
/// contribute a zero difference.
pub fn total_variation(delta: &[f64], topology: TvTopology) -> Result<f64> {
    check_topology(delta.len(), topology)?;
    Ok(tv_restricted(delta, topology, None))
}

fn check_topology(len: usize, topology: TvTopology) -> Result<()> {
    if let TvTopology::Grid { rows, cols } = topology {
        if rows * cols != len {
            return Err(Error::GridShape { rows, cols, len });
        }
    }
    Ok(())
}

/// TV where only pairs with both ends in `active` (when given) count.
fn tv_restricted(delta: &[f64], topology: TvTopology, active: Option<&[bool]>) -> f64 {
    let on = |i: usize| active.is_none_or(|a| a[i]);
    match topology {
        TvTopology::Chain => delta
            .windows(2)
            .enumerate()
            .filter(|(i, _)| on(*i) && on(i + 1))
            .map(|(_, w)| libm::fabs(w[0] - w[1]))
            .sum(),
        TvTopology::Grid { rows, cols } => {
            let mut total = 0.0;
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    if !on(i) {
                        continue;
                    }
                    let mut sq = 0.0;
                    if c + 1 < cols && on(i + 1) {
                        let d = delta[i] - delta[i + 1];
                        sq += d * d;
                    }
                    if r + 1 < rows && on(i + cols) {
                        let d = delta[i] - delta[i + cols];
                        sq += d * d;
                    }
                    total += libm::sqrt(sq);
                }
            }
            total
        }
    }
}

/// Non-printability score: sum over `values` of the product of distances to
/// every palette entry.
pub fn nps(values: &[f64], palette: &[f64]) -> f64 {
    values
        .iter()
        .map(|&p| palette.iter().map(|&q| libm::fabs(p - q)).product::<f64>())
        .sum()
}

/// Intermediate perturbations of a two-phase generation run.
///
/// Record `j` holds the state `δ^(j)` before update `j + 1`; records
/// `N..=2N` are the injectable intermediates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub iterations: usize,
    /// Full-length perturbations; non-editable coordinates are zero.
    pub deltas: Vec<Vec<f64>>,
    /// Per-sample distances to the target of the record's phase.
    pub distances: Vec<Vec<f64>>,
    /// Mean L2 distance of the perturbed batch embeddings to the victim target.
    pub victim_distance: Vec<f64>,
    /// L2 distance of the perturbed batch's mean embedding to the victim target.
    pub centroid_distance: Vec<f64>,
    /// Weighted distance objective plus the NPS and TV penalties.
    pub objective: Vec<f64>,
}

impl GenerationTrace {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// First injectable record (`N`).
    pub fn phase2_start(&self) -> usize {
        self.iterations
    }

    /// Last injectable record (`2N`).
    pub fn phase2_end(&self) -> usize {
        2 * self.iterations
    }

    /// `j / 2N`.
    pub fn position(&self, j: usize) -> f64 {
        j as f64 / (2 * self.iterations) as f64
    }

    pub fn mean_distance(&self, j: usize) -> f64 {
        let d = &self.distances[j];
        d.iter().sum::<f64>() / d.len() as f64
    }
}

fn p_gradient(e: &[f64], target: &[f64], p: f64) -> (f64, Vec<f64>) {
    let dist = linalg::p_distance(e, target, p);
    if dist == 0.0 {
        return (0.0, vec![0.0; e.len()]);
    }
    let grad = e
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = a - b;
            if p == 2.0 {
                d / dist
            } else {
                let mag = libm::pow(libm::fabs(d) / dist, p - 1.0);
                if d > 0.0 {
                    mag
                } else if d < 0.0 {
                    -mag
                } else {
                    0.0
                }
            }
        })
        .collect();
    (dist, grad)
}

fn random_glasses(mask: &PerturbationMask, rng: &mut SimRng) -> Vec<f64> {
    (0..mask.len())
        .map(|i| {
            if mask.is_editable(i) {
                feature_space::uniform(rng, 0.25, 0.75)
            } else {
                0.0
            }
        })
        .collect()
}

/// Optimizes one perturbation shared by the whole attacker batch: `N` steps
/// towards the batch's own embedding centroid, then `N` steps towards
/// `target`. Each step back-propagates the per-sample distance gradients,
/// weights sample `i` by `dist_i / mean_dist` and moves the `top_m` editable
/// coordinates with the best gradient-versus-penalty score by `±λ`.
pub fn batch_masked_generate(
    f: &FeatureExtractor,
    batch: &[RawSample],
    mask: &PerturbationMask,
    target: &[f64],
    cfg: &GenerationConfig,
    rng: &mut SimRng,
) -> Result<GenerationTrace> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptySet("attacker batch"));
    }
    if mask.len() != f.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: f.input_dim(),
            found: mask.len(),
        });
    }
    if target.len() != f.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: f.output_dim(),
            found: target.len(),
        });
    }
    check_topology(mask.len(), cfg.tv_topology)?;
    let clean: Vec<Embedding> = batch.iter().map(|x| f.extract(x)).collect::<Result<_>>()?;
    let attacker_centroid = linalg::mean(clean.iter().map(Vec::as_slice));

    let editable = mask.indices();
    let n = cfg.iterations;
    let mut delta = random_glasses(mask, rng);
    let mut beta: Option<f64> = None;
    let mut trace = GenerationTrace {
        iterations: n,
        deltas: Vec::with_capacity(2 * n + 1),
        distances: Vec::with_capacity(2 * n + 1),
        victim_distance: Vec::with_capacity(2 * n + 1),
        centroid_distance: Vec::with_capacity(2 * n + 1),
        objective: Vec::with_capacity(2 * n + 1),
    };

    for j in 0..=2 * n {
        let step_target: &[f64] = if j < n { &attacker_centroid } else { target };
        let mut dists = Vec::with_capacity(batch.len());
        let mut grads = Vec::with_capacity(batch.len());
        let mut embeddings = Vec::with_capacity(batch.len());
        for x in batch {
            let xp = apply_perturbation(x, mask, &delta)?;
            let e = f.extract(&xp)?;
            let (dist, v) = p_gradient(&e, step_target, cfg.p);
            if j < 2 * n {
                let (_, g) = f.vjp(&xp, &v)?;
                grads.push(g);
            }
            dists.push(dist);
            embeddings.push(e);
        }
        let mu = dists.iter().sum::<f64>() / dists.len() as f64;
        let weights: Vec<f64> = if mu > 0.0 {
            dists.iter().map(|d| d / mu).collect()
        } else {
            vec![1.0; dists.len()]
        };
        let masked_values: Vec<f64> = editable.iter().map(|&i| delta[i]).collect();
        let penalty_now = nps(&masked_values, &cfg.palette)
            + tv_restricted(&delta, cfg.tv_topology, Some(mask.editable()));
        let weighted =
            dists.iter().zip(&weights).map(|(d, w)| d * w).sum::<f64>() / dists.len() as f64;
        let mean_victim = embeddings
            .iter()
            .map(|e| linalg::distance(e, target))
            .sum::<f64>()
            / embeddings.len() as f64;
        let centroid = linalg::mean(embeddings.iter().map(Vec::as_slice));
        trace.deltas.push(delta.clone());
        trace.distances.push(dists);
        trace.victim_distance.push(mean_victim);
        trace
            .centroid_distance
            .push(linalg::distance(&centroid, target));
        trace.objective.push(weighted + penalty_now);
        if j == 2 * n {
            break;
        }

        let mut g = vec![0.0; delta.len()];
        for (gi, w) in grads.iter().zip(&weights) {
            for &k in &editable {
                g[k] += w * gi[k];
            }
        }
        for &k in &editable {
            g[k] /= batch.len() as f64;
        }

        // (coordinate, |gradient|, penalty, new value)
        let mut moves: Vec<(usize, f64, f64, f64)> = Vec::with_capacity(editable.len());
        for &k in &editable {
            if g[k] == 0.0 {
                continue;
            }
            let dir = if g[k] > 0.0 { -1.0 } else { 1.0 };
            let new = (delta[k] + cfg.lambda * dir).clamp(0.0, 1.0);
            if new == delta[k] {
                continue;
            }
            let old = delta[k];
            let d_nps = nps(&[new], &cfg.palette) - nps(&[old], &cfg.palette);
            delta[k] = new;
            let tv_new = tv_restricted(&delta, cfg.tv_topology, Some(mask.editable()));
            delta[k] = old;
            let tv_old = tv_restricted(&delta, cfg.tv_topology, Some(mask.editable()));
            moves.push((k, libm::fabs(g[k]), d_nps + tv_new - tv_old, new));
        }
        if moves.is_empty() {
            continue;
        }
        let b = *beta.get_or_insert_with(|| {
            let mags: Vec<f64> = moves.iter().map(|m| m.1).collect();
            let pens: Vec<f64> = moves.iter().map(|m| libm::fabs(m.2)).collect();
            match (linalg::median(&mags), linalg::median(&pens)) {
                (Some(gm), Some(pm)) if pm > 0.0 => gm / pm,
                _ => 0.0,
            }
        });
        moves.sort_by(|a, b_| {
            let sa = a.1 - b * a.2;
            let sb = b_.1 - b * b_.2;
            sb.total_cmp(&sa).then(a.0.cmp(&b_.0))
        });
        for &(k, _, _, new) in moves.iter().take(cfg.top_m) {
            delta[k] = new;
        }
    }
    Ok(trace)
}

/// Output of [`saliency_generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyTrace {
    /// `samples[0]` is the starting sample.
    pub samples: Vec<RawSample>,
    /// L2 distance of each sample's embedding to the target.
    pub objective: Vec<f64>,
    pub stagnated: bool,
}

const STAGNATION_WINDOW: usize = 50;
const STAGNATION_EPS: f64 = 1e-12;

/// Saliency-map generation: each step raises the editable coordinate whose
/// Jacobian column best agrees with the desired output direction and lowers
/// the one that disagrees most, both by `step`.
pub fn saliency_generate<P>(
    f: &FeatureExtractor,
    x: &[f64],
    mask: &PerturbationMask,
    target: &[f64],
    step: f64,
    max_iterations: usize,
    mut stop: P,
) -> Result<SaliencyTrace>
where
    P: FnMut(&[f64], &[f64]) -> bool,
{
    if mask.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: mask.len(),
        });
    }
    if target.len() != f.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: f.output_dim(),
            found: target.len(),
        });
    }
    let editable = mask.indices();
    let mut current = x.to_vec();
    let mut e = f.extract(&current)?;
    let mut trace = SaliencyTrace {
        samples: vec![current.clone()],
        objective: vec![linalg::distance(&e, target)],
        stagnated: false,
    };
    for _ in 0..max_iterations {
        if stop(&current, &e) {
            break;
        }
        let jac = f.jacobian(&current)?;
        let diff: Vec<f64> = target.iter().zip(&e).map(|(t, v)| t - v).collect();
        let dir: Vec<f64> = diff
            .iter()
            .map(|&d| {
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mut up: Option<(usize, f64, f64)> = None;
        let mut down: Option<(usize, f64, f64)> = None;
        for &i in &editable {
            let col = jac.column(i);
            let s = linalg::dot(&dir, &col);
            let tie = libm::fabs(linalg::dot(&diff, &col));
            if current[i] < 1.0
                && s > 0.0
                && up.is_none_or(|(_, bs, bt)| s > bs || (s == bs && tie > bt))
            {
                up = Some((i, s, tie));
            }
            if current[i] > 0.0
                && s < 0.0
                && down.is_none_or(|(_, bs, bt)| s < bs || (s == bs && tie > bt))
            {
                down = Some((i, s, tie));
            }
        }
        if up.is_none() && down.is_none() {
            trace.stagnated = true;
            break;
        }
        if let Some((i, _, _)) = up {
            current[i] = (current[i] + step).min(1.0);
        }
        if let Some((i, _, _)) = down {
            current[i] = (current[i] - step).max(0.0);
        }
        e = f.extract(&current)?;
        trace.samples.push(current.clone());
        trace.objective.push(linalg::distance(&e, target));
        let k = trace.objective.len();
        if k > STAGNATION_WINDOW
            && trace.objective[k - 1 - STAGNATION_WINDOW] - trace.objective[k - 1] < STAGNATION_EPS
        {
            trace.stagnated = true;
            break;
        }
    }
    Ok(trace)
}

/// One observation from a population attack run: whether the batch wearing
/// the perturbation of a given step cleared the update gate at a given
/// injection rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicRecord {
    pub rank: usize,
    /// Step index normalized by `2N`.
    pub position: f64,
    /// Mean L2 distance of the perturbed batch to the known victim sample.
    pub distance: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

const COV_REGULARIZER: f64 = 1e-9;

impl Gaussian2 {
    fn fit(points: &[[f64; 2]]) -> Self {
        let n = points.len() as f64;
        let mean = [
            points.iter().map(|p| p[0]).sum::<f64>() / n,
            points.iter().map(|p| p[1]).sum::<f64>() / n,
        ];
        let mut cov = [[0.0; 2]; 2];
        if points.len() > 1 {
            for p in points {
                let d = [p[0] - mean[0], p[1] - mean[1]];
                for r in 0..2 {
                    for c in 0..2 {
                        cov[r][c] += d[r] * d[c];
                    }
                }
            }
            for row in cov.iter_mut() {
                for v in row.iter_mut() {
                    *v /= n - 1.0;
                }
            }
        }
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        if !(cov[0][0] > 0.0 && det > 0.0) {
            cov[0][0] += COV_REGULARIZER;
            cov[1][1] += COV_REGULARIZER;
        }
        Self { mean, cov }
    }

    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        let [[a, b], [c, d]] = self.cov;
        let det = a * d - b * c;
        let dx = [x[0] - self.mean[0], x[1] - self.mean[1]];
        let q = (d * dx[0] * dx[0] - (b + c) * dx[0] * dx[1] + a * dx[1] * dx[1]) / det;
        -0.5 * q - 0.5 * libm::log(det) - libm::log(2.0 * core::f64::consts::PI)
    }
}

/// One Gaussian per injection rank; ranks past the end reuse the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicModel {
    pub ranks: Vec<Gaussian2>,
}

impl HeuristicModel {
    pub fn for_rank(&self, rank: usize) -> &Gaussian2 {
        &self.ranks[rank.min(self.ranks.len() - 1)]
    }
}

const MIN_RECORDS_PER_RANK: usize = 3;

/// Fits a Gaussian over `(position, distance)` of the accepted records of
/// each injection rank. Trailing ranks with fewer than three accepted records
/// are dropped; an under-populated rank before a populated one is an error.
pub fn fit_heuristic(records: &[HeuristicRecord]) -> Result<HeuristicModel> {
    let max_rank = records.iter().map(|r| r.rank).max().unwrap_or(0);
    let mut per_rank: Vec<Vec<[f64; 2]>> = vec![Vec::new(); max_rank + 1];
    for r in records.iter().filter(|r| r.accepted) {
        per_rank[r.rank].push([r.position, r.distance]);
    }
    let fitted = per_rank
        .iter()
        .rposition(|pts| pts.len() >= MIN_RECORDS_PER_RANK)
        .map_or(0, |last| last + 1);
    if fitted == 0 {
        return Err(Error::HeuristicFit {
            rank: 0,
            found: per_rank[0].len(),
        });
    }
    let mut ranks = Vec::with_capacity(fitted);
    for (rank, pts) in per_rank.iter().take(fitted).enumerate() {
        if pts.len() < MIN_RECORDS_PER_RANK {
            return Err(Error::HeuristicFit {
                rank,
                found: pts.len(),
            });
        }
        ranks.push(Gaussian2::fit(pts));
    }
    Ok(HeuristicModel { ranks })
}

/// Injectable step with the highest log-density under the rank's Gaussian;
/// the earliest step wins ties.
pub fn heuristic_select(model: &HeuristicModel, rank: usize, trace: &GenerationTrace) -> usize {
    let g = model.for_rank(rank);
    let mut best = trace.phase2_start();
    let mut best_ld = f64::NEG_INFINITY;
    for j in trace.phase2_start()..=trace.phase2_end() {
        let ld = g.log_density([trace.position(j), trace.victim_distance[j]]);
        if ld > best_ld {
            best = j;
            best_ld = ld;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Fraction of unmasked attacker samples that must be accepted to stop.
    pub theta1: f64,
    /// Fraction of the perturbed batch that must be accepted to inject.
    pub theta2: f64,
    /// Cap on injection attempts, failed ones included.
    pub max_injection_attempts: usize,
    /// Steps to advance after a failed attempt; defaults to `max(1, N/20)`.
    #[serde(default)]
    pub fallback_step: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            theta1: 0.5,
            theta2: 0.5,
            max_injection_attempts: 200,
            fallback_step: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("theta1", self.theta1), ("theta2", self.theta2)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside (0, 1]")));
            }
        }
        if self.fallback_step == Some(0) {
            return Err(Error::InvalidConfig(
                "fallback_step must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn effective_fallback(&self, iterations: usize) -> usize {
        self.fallback_step.unwrap_or((iterations / 20).max(1))
    }
}

/// How the attacker picks the intermediate sample to inject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AttackMode {
    /// Queries the update gate and injects the earliest accepted step.
    Oracle,
    /// Starts every injection at the rank's most likely step.
    Heuristic { model: HeuristicModel },
    /// Starts every injection at step `N`.
    Iterative,
}

impl AttackMode {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMode::Oracle => "oracle",
            AttackMode::Heuristic { .. } => "heuristic",
            AttackMode::Iterative => "iterative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Success,
    MaxAttempts,
    /// No injectable step clears the gate any more.
    Exhausted,
    /// The system authenticated the sample but refused to update.
    UpdateRefused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionEvent {
    pub rank: usize,
    pub step: usize,
    /// Step tried first for this injection.
    pub first_step: usize,
    pub failures: usize,
    /// Fraction of the perturbed batch accepted at `step`.
    pub batch_acceptance: f64,
    pub score: f64,
    /// Order of the matching entry in the victim's update log.
    pub log_order: u64,
    pub embedding: Embedding,
}

impl InjectionEvent {
    pub fn first_pick_accepted(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub success: bool,
    pub stop_reason: StopReason,
    pub injections_attempted: usize,
    pub injections_accepted: usize,
    pub failures: usize,
    pub iar_trajectory: Vec<f64>,
    pub far_trajectory: Vec<f64>,
    pub frr_trajectory: Vec<f64>,
    pub events: Vec<InjectionEvent>,
    /// Every probed step with its gate outcome (oracle mode only).
    pub heuristic_records: Vec<HeuristicRecord>,
}

impl AttackResult {
    /// Accepted injections needed to reach the goal, if it was reached.
    pub fn injections_to_success(&self) -> Option<usize> {
        self.success.then_some(self.injections_accepted)
    }
}

/// Everything the attack needs besides the victim system.
#[derive(Debug, Clone, Copy)]
pub struct AttackScenario<'a> {
    /// Extractor of the attacked system.
    pub extractor: &'a FeatureExtractor,
    pub mask: &'a PerturbationMask,
    /// Raw attacker samples the perturbation is optimized on and worn with.
    pub batch: &'a [RawSample],
    /// Unperturbed attacker embeddings used for the impostor accept rate.
    pub attacker_eval: &'a [Embedding],
    pub known_victim_sample: &'a [f64],
    pub victim_test: &'a [Embedding],
    pub others: &'a [Embedding],
}

/// Runs the poisoning loop with the target extractor as generator.
pub fn run_poisoning(
    system: &mut AuthSystem,
    scenario: &AttackScenario<'_>,
    cfg: &AttackConfig,
    gen_cfg: &GenerationConfig,
    mode: &AttackMode,
    seed: u64,
) -> Result<AttackResult> {
    run_transfer_poisoning(
        scenario.extractor,
        system,
        scenario,
        cfg,
        gen_cfg,
        mode,
        seed,
    )
}

/// Runs the poisoning loop with perturbations crafted on `surrogate`;
/// acceptance, injection and rates are evaluated on the attacked system.
pub fn run_transfer_poisoning(
    surrogate: &FeatureExtractor,
    system: &mut AuthSystem,
    scenario: &AttackScenario<'_>,
    cfg: &AttackConfig,
    gen_cfg: &GenerationConfig,
    mode: &AttackMode,
    seed: u64,
) -> Result<AttackResult> {
    cfg.validate()?;
    gen_cfg.validate()?;
    let target_f = scenario.extractor;
    if surrogate.input_dim() != target_f.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: target_f.input_dim(),
            found: surrogate.input_dim(),
        });
    }
    let known = target_f.extract(scenario.known_victim_sample)?;
    if !system.decide(&known)? {
        return Err(Error::InvalidConfig(
            "known victim sample is rejected by the victim system".into(),
        ));
    }

    let snapshot = |sys: &AuthSystem| -> Result<RateSnapshot> {
        metrics::snapshot_rates(
            sys.matcher(),
            scenario.victim_test,
            scenario.attacker_eval,
            scenario.others,
        )
    };
    let base = snapshot(system)?;
    let mut result = AttackResult {
        success: false,
        stop_reason: StopReason::MaxAttempts,
        injections_attempted: 0,
        injections_accepted: 0,
        failures: 0,
        iar_trajectory: vec![base.iar],
        far_trajectory: vec![base.far],
        frr_trajectory: vec![base.frr],
        events: Vec::new(),
        heuristic_records: Vec::new(),
    };
    if base.iar >= cfg.theta1 {
        result.success = true;
        result.stop_reason = StopReason::Success;
        return Ok(result);
    }

    let mut gen_rng = seed::rng_from(seed, &[stream::ATTACK, 0]);
    let mut pick_rng = seed::rng_from(seed, &[stream::ATTACK, 1]);
    let surrogate_target = surrogate.extract(scenario.known_victim_sample)?;
    let trace = batch_masked_generate(
        surrogate,
        scenario.batch,
        scenario.mask,
        &surrogate_target,
        gen_cfg,
        &mut gen_rng,
    )?;
    let fallback = cfg.effective_fallback(gen_cfg.iterations);
    let (start, end) = (trace.phase2_start(), trace.phase2_end());
    let mut candidates: Vec<Option<Vec<Embedding>>> = vec![None; end + 1];
    let batch_n = scenario.batch.len() as f64;

    let mut rank = 0usize;
    loop {
        let iar = *result.iar_trajectory.last().unwrap();
        if iar >= cfg.theta1 {
            result.success = true;
            result.stop_reason = StopReason::Success;
            break;
        }
        if result.injections_attempted >= cfg.max_injection_attempts {
            result.stop_reason = StopReason::MaxAttempts;
            break;
        }

        let mut gate = |j: usize, sys: &AuthSystem| -> Result<Vec<usize>> {
            if candidates[j].is_none() {
                let embs = scenario
                    .batch
                    .iter()
                    .map(|x| {
                        target_f.extract(&apply_perturbation(x, scenario.mask, &trace.deltas[j])?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                candidates[j] = Some(embs);
            }
            let embs = candidates[j].as_ref().unwrap();
            Ok(embs
                .iter()
                .enumerate()
                .filter(|(_, e)| sys.matcher().model.score_unchecked(e) >= sys.threshold())
                .map(|(i, _)| i)
                .collect())
        };
        let clears = |accepted: &[usize]| accepted.len() as f64 >= cfg.theta2 * batch_n - 1e-12;

        let chosen: Option<(usize, usize, usize, Vec<usize>)> = match mode {
            AttackMode::Oracle => {
                let mut earliest = None;
                for j in start..=end {
                    let acc = gate(j, system)?;
                    let ok = clears(&acc);
                    result.heuristic_records.push(HeuristicRecord {
                        rank,
                        position: trace.position(j),
                        distance: trace.victim_distance[j],
                        accepted: ok,
                    });
                    if ok {
                        earliest = Some((j, acc));
                        break;
                    }
                }
                match earliest {
                    Some((j, acc)) => {
                        result.injections_attempted += 1;
                        Some((j, j, 0, acc))
                    }
                    None => {
                        result.stop_reason = StopReason::Exhausted;
                        break;
                    }
                }
            }
            AttackMode::Heuristic { .. } | AttackMode::Iterative => {
                let first = match mode {
                    AttackMode::Heuristic { model } => heuristic_select(model, rank, &trace),
                    _ => start,
                };
                let mut j = first;
                let mut failures = 0usize;
                let mut found = None;
                loop {
                    if result.injections_attempted >= cfg.max_injection_attempts {
                        result.stop_reason = StopReason::MaxAttempts;
                        break;
                    }
                    if j > end {
                        result.stop_reason = StopReason::Exhausted;
                        break;
                    }
                    result.injections_attempted += 1;
                    let acc = gate(j, system)?;
                    if clears(&acc) {
                        found = Some((j, first, failures, acc));
                        break;
                    }
                    failures += 1;
                    result.failures += 1;
                    j += fallback;
                }
                found
            }
        };
        let Some((j, first, failures, accepted)) = chosen else {
            break;
        };

        let pick = accepted[pick_rng.random_range(0..accepted.len())];
        let embedding = candidates[j].as_ref().unwrap()[pick].clone();
        let score = system.score(&embedding)?;
        let outcome = system.attempt_auth_and_update(&embedding)?;
        if !outcome.is_accepted() {
            result.stop_reason = StopReason::UpdateRefused;
            break;
        }
        result.injections_accepted += 1;
        let log_order = system.log().events().last().map_or(0, |e| e.order);
        result.events.push(InjectionEvent {
            rank,
            step: j,
            first_step: first,
            failures,
            batch_acceptance: accepted.len() as f64 / batch_n,
            score,
            log_order,
            embedding,
        });
        let snap = snapshot(system)?;
        result.iar_trajectory.push(snap.iar);
        result.far_trajectory.push(snap.far);
        result.frr_trajectory.push(snap.frr);
        rank += 1;
    }
    result.failures = result.injections_attempted - result.injections_accepted;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_space::{Activation, DenseLayer};
    use crate::linalg::Matrix;

    fn identity(n: usize) -> FeatureExtractor {
        FeatureExtractor::new(
            vec![DenseLayer {
                weights: Matrix::identity(n),
                bias: vec![0.0; n],
                activation: Activation::Identity,
            }],
            false,
            0,
        )
        .unwrap()
    }

    #[test]
    fn total_variation_examples() {
        let chain = TvTopology::Chain;
        assert_eq!(total_variation(&[0.3; 5], chain).unwrap(), 0.0);
        assert_eq!(total_variation(&[0.0, 1.0, 0.0], chain).unwrap(), 2.0);
        let grid = TvTopology::Grid { rows: 2, cols: 2 };
        assert_eq!(total_variation(&[0.0, 1.0, 0.0, 1.0], grid).unwrap(), 2.0);
        assert!(matches!(
            total_variation(&[0.0; 5], grid),
            Err(Error::GridShape { .. })
        ));
    }

    #[test]
    fn nps_examples() {
        assert_eq!(nps(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        assert_eq!(nps(&[0.5], &[0.0, 1.0]), 0.25);
        assert!((nps(&[0.25, 0.75], &[0.0, 0.5, 1.0]) - 0.09375).abs() < 1e-15);
    }

    #[test]
    fn generation_rejects_bad_config() {
        let f = identity(4);
        let mask = PerturbationMask::full(4, None).unwrap();
        let mut rng = seed::rng_from(1, &[]);
        let cfg = GenerationConfig {
            tv_topology: TvTopology::Chain,
            ..GenerationConfig::default()
        };
        let batch = vec![vec![0.5; 4]];
        for bad in [
            GenerationConfig {
                lambda: 0.0,
                ..cfg.clone()
            },
            GenerationConfig {
                top_m: 0,
                ..cfg.clone()
            },
            GenerationConfig {
                iterations: 0,
                ..cfg.clone()
            },
            GenerationConfig {
                palette: vec![],
                ..cfg.clone()
            },
        ] {
            assert!(matches!(
                batch_masked_generate(&f, &batch, &mask, &[0.0; 4], &bad, &mut rng),
                Err(Error::InvalidConfig(_))
            ));
        }
        assert!(matches!(
            batch_masked_generate(&f, &batch, &mask, &[0.0; 3], &cfg, &mut rng),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn linear_generation_moves_towards_target() {
        let f = identity(4);
        let mask = PerturbationMask::full(4, None).unwrap();
        let mut rng = seed::rng_from(3, &[]);
        let cfg = GenerationConfig {
            lambda: 0.05,
            top_m: 4,
            iterations: 10,
            palette: vec![0.5],
            tv_topology: TvTopology::Chain,
            ..GenerationConfig::default()
        };
        let target = [0.9, 0.1, 0.9, 0.1];
        let trace =
            batch_masked_generate(&f, &[vec![0.5; 4]], &mask, &target, &cfg, &mut rng).unwrap();
        assert_eq!(trace.len(), 21);
        let n = trace.iterations;
        assert!(trace.victim_distance[n + 1] < trace.victim_distance[n]);
        assert!(trace.victim_distance[2 * n] <= 0.1 + 1e-9);
    }

    #[test]
    fn saliency_stops_immediately_at_target() {
        let f = identity(3);
        let mask = PerturbationMask::full(3, None).unwrap();
        let x = [0.2, 0.4, 0.6];
        let t = saliency_generate(&f, &x, &mask, &x, 0.1, 100, |_, e| {
            linalg::distance(e, &x) < 1e-12
        })
        .unwrap();
        assert_eq!(t.samples.len(), 1);
    }

    #[test]
    fn saliency_linear_case_decreases() {
        let f = identity(3);
        let mask = PerturbationMask::full(3, None).unwrap();
        let x = [0.2, 0.4, 0.6];
        let y = [0.6, 0.4, 0.5];
        let t = saliency_generate(&f, &x, &mask, &y, 0.05, 100, |_, e| {
            linalg::distance(e, &y) <= 0.05
        })
        .unwrap();
        // The widest gap (coordinate 0) moves first.
        assert!(t.samples[1][0] > x[0]);
        for w in t.objective.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(*t.objective.last().unwrap() <= 0.05);
    }

    #[test]
    fn heuristic_fit_examples() {
        let pt = |rank, position, distance| HeuristicRecord {
            rank,
            position,
            distance,
            accepted: true,
        };
        let m = fit_heuristic(&[pt(0, 0.5, 0.3); 3]).unwrap();
        assert_eq!(m.ranks[0].mean, [0.5, 0.3]);
        assert_eq!(m.ranks[0].cov, [[1e-9, 0.0], [0.0, 1e-9]]);

        let m = fit_heuristic(&[pt(0, 1.0, 1.0), pt(0, 2.0, 2.0), pt(0, 3.0, 3.0)]).unwrap();
        assert_eq!(m.ranks[0].mean, [2.0, 2.0]);

        let err = fit_heuristic(&[pt(0, 1.0, 1.0), pt(0, 3.0, 3.0)]).unwrap_err();
        assert_eq!(err, Error::HeuristicFit { rank: 0, found: 2 });

        let mut gap = vec![
            pt(0, 0.1, 0.1),
            pt(0, 0.2, 0.3),
            pt(0, 0.3, 0.2),
            pt(1, 0.5, 0.5),
        ];
        gap.extend([pt(2, 0.1, 0.1), pt(2, 0.2, 0.3), pt(2, 0.3, 0.2)]);
        assert_eq!(
            fit_heuristic(&gap).unwrap_err(),
            Error::HeuristicFit { rank: 1, found: 1 }
        );
        gap.truncate(4);
        assert_eq!(fit_heuristic(&gap).unwrap().ranks.len(), 1);
    }

    fn toy_trace(distances: &[f64]) -> GenerationTrace {
        let n = (distances.len() - 1) / 2;
        GenerationTrace {
            iterations: n,
            deltas: vec![vec![]; distances.len()],
            distances: distances.iter().map(|&d| vec![d]).collect(),
            victim_distance: distances.to_vec(),
            centroid_distance: distances.to_vec(),
            objective: distances.to_vec(),
        }
    }

    #[test]
    fn heuristic_select_picks_the_mode() {
        let trace = toy_trace(&[1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4]);
        let model = HeuristicModel {
            ranks: vec![Gaussian2 {
                mean: [trace.position(5), 0.5],
                cov: [[1e-6, 0.0], [0.0, 1e-6]],
            }],
        };
        assert_eq!(heuristic_select(&model, 0, &trace), 5);
        assert_eq!(heuristic_select(&model, 7, &trace), 5);
    }
}
