//! User templates and the three template matchers (`centroid`, `maximum`,
//! one-class ν-SVM with a linear kernel), optional recency weighting, and
//! threshold calibration at the equal error rate.
//!
//! All matchers score with a higher-is-more-genuine convention, so a sample is
//! accepted iff `score >= threshold`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{Embedding, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Enrolled,
    SelfUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub embedding: Embedding,
    pub order_index: u64,
    pub origin: Origin,
}

/// Ordered set of embeddings a user is matched against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    entries: Vec<TemplateEntry>,
}

impl Template {
    pub fn new(entries: Vec<TemplateEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyTemplate);
        }
        let dim = entries[0].embedding.len();
        for w in entries.windows(2) {
            if w[1].order_index <= w[0].order_index {
                return Err(Error::InvalidConfig(format!(
                    "order indices must increase ({} after {})",
                    w[1].order_index, w[0].order_index
                )));
            }
        }
        if let Some(e) = entries.iter().find(|e| e.embedding.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: e.embedding.len(),
            });
        }
        Ok(Self { entries })
    }

    /// Enrolment template with order indices `0..n`.
    pub fn enrolled(embeddings: Vec<Embedding>) -> Result<Self> {
        Self::new(
            embeddings
                .into_iter()
                .enumerate()
                .map(|(i, embedding)| TemplateEntry {
                    embedding,
                    order_index: i as u64,
                    origin: Origin::Enrolled,
                })
                .collect(),
        )
    }

    pub fn push(&mut self, embedding: Embedding, order_index: u64, origin: Origin) -> Result<()> {
        if embedding.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: embedding.len(),
            });
        }
        if let Some(last) = self.entries.last() {
            if order_index <= last.order_index {
                return Err(Error::InvalidConfig(format!(
                    "order index {order_index} does not follow {}",
                    last.order_index
                )));
            }
        }
        self.entries.push(TemplateEntry {
            embedding,
            order_index,
            origin,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].embedding.len()
    }

    pub fn entries(&self) -> &[TemplateEntry] {
        &self.entries
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(|e| e.embedding.as_slice())
    }

    pub fn self_update_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.origin == Origin::SelfUpdate)
            .count()
    }

    /// Removes the `k` most recent self-update entries; enrolled entries stay.
    pub fn remove_last_self_updates(&mut self, k: usize) -> Result<Vec<TemplateEntry>> {
        let available = self.self_update_count();
        if k > available {
            return Err(Error::RollbackExceeds {
                requested: k,
                available,
            });
        }
        let mut removed = Vec::with_capacity(k);
        let mut idx = self.entries.len();
        while removed.len() < k {
            idx -= 1;
            if self.entries[idx].origin == Origin::SelfUpdate {
                removed.push(self.entries.remove(idx));
            }
        }
        removed.reverse();
        Ok(removed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Flat,
    Sigmoid,
}

/// Per-entry weights for a template of `n` entries ordered oldest first.
///
/// `Sigmoid` maps ranks linearly onto `[-5, 5]` (a single entry sits at `+5`)
/// and applies the logistic function, so recent entries dominate.
pub fn compute_weights(n: usize, scheme: WeightScheme) -> Vec<f64> {
    match scheme {
        WeightScheme::Flat => vec![1.0; n],
        WeightScheme::Sigmoid => {
            if n == 1 {
                return vec![sigmoid(5.0)];
            }
            (0..n)
                .map(|i| sigmoid(-5.0 + 10.0 * i as f64 / (n - 1) as f64))
                .collect()
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MatcherKind {
    Centroid,
    Maximum,
    OcSvm { nu: f64 },
}

impl MatcherKind {
    pub fn name(&self) -> &'static str {
        match self {
            MatcherKind::Centroid => "centroid",
            MatcherKind::Maximum => "maximum",
            MatcherKind::OcSvm { .. } => "svm",
        }
    }
}

/// Fitted matcher parameters, without a decision threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MatcherModel {
    Centroid {
        center: Embedding,
    },
    Maximum {
        samples: Vec<Embedding>,
        weights: Vec<f64>,
    },
    OcSvm {
        nu: f64,
        alpha: Vec<f64>,
        w: Vec<f64>,
        w_norm: f64,
        rho: f64,
    },
}

/// KKT tolerance of the one-class SVM solver.
pub const SVM_TOLERANCE: f64 = 1e-6;
const SVM_MAX_ITERATIONS: usize = 200_000;

impl MatcherModel {
    pub fn fit(kind: MatcherKind, template: &Template, scheme: WeightScheme) -> Result<Self> {
        if template.is_empty() {
            return Err(Error::EmptyTemplate);
        }
        let weights = compute_weights(template.len(), scheme);
        Ok(match kind {
            MatcherKind::Centroid => MatcherModel::Centroid {
                center: linalg::weighted_mean(template.embeddings(), &weights),
            },
            MatcherKind::Maximum => MatcherModel::Maximum {
                samples: template.embeddings().map(<[f64]>::to_vec).collect(),
                weights,
            },
            MatcherKind::OcSvm { nu } => {
                let n = template.len();
                if !(nu > 0.0 && nu <= 1.0) {
                    return Err(Error::InvalidConfig(format!("nu {nu} outside (0, 1]")));
                }
                if (n as f64) * nu < 1.0 - 1e-12 {
                    return Err(Error::InvalidConfig(format!(
                        "n * nu = {} < 1 leaves the one-class dual infeasible",
                        n as f64 * nu
                    )));
                }
                let points: Vec<&[f64]> = template.embeddings().collect();
                let total: f64 = weights.iter().sum();
                let bounds: Vec<f64> = weights.iter().map(|w| w / (nu * total)).collect();
                let sol = solve_one_class(&points, &bounds, SVM_TOLERANCE, SVM_MAX_ITERATIONS)?;
                let w_norm = linalg::norm(&sol.w);
                MatcherModel::OcSvm {
                    nu,
                    alpha: sol.alpha,
                    w: sol.w,
                    w_norm,
                    rho: sol.rho,
                }
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            MatcherModel::Centroid { center } => center.len(),
            MatcherModel::Maximum { samples, .. } => samples[0].len(),
            MatcherModel::OcSvm { w, .. } => w.len(),
        }
    }

    /// Higher is more genuine. Panics in debug builds on a dimension mismatch;
    /// use [`TrainedMatcher::score`] for a checked variant.
    pub fn score_unchecked(&self, e: &[f64]) -> f64 {
        match self {
            MatcherModel::Centroid { center } => -linalg::distance(e, center),
            MatcherModel::Maximum { samples, weights } => {
                let best = samples
                    .iter()
                    .zip(weights)
                    .map(|(s, w)| linalg::distance(e, s) / w)
                    .fold(f64::INFINITY, f64::min);
                -best
            }
            MatcherModel::OcSvm { w, w_norm, rho, .. } => {
                if *w_norm > 0.0 {
                    (linalg::dot(w, e) - rho) / w_norm
                } else {
                    -rho
                }
            }
        }
    }
}

/// A fitted matcher with its fixed acceptance threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedMatcher {
    pub kind: MatcherKind,
    pub scheme: WeightScheme,
    pub model: MatcherModel,
    pub threshold: f64,
}

impl TrainedMatcher {
    pub fn score(&self, e: &[f64]) -> Result<f64> {
        if e.len() != self.model.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.model.dim(),
                found: e.len(),
            });
        }
        Ok(self.model.score_unchecked(e))
    }

    pub fn decide(&self, e: &[f64]) -> Result<bool> {
        Ok(self.score(e)? >= self.threshold)
    }

    /// Fraction of `samples` accepted.
    pub fn acceptance_rate<'a, I>(&self, samples: I) -> f64
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut accepted = 0usize;
        for s in samples {
            n += 1;
            if self.model.score_unchecked(s) >= self.threshold {
                accepted += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            accepted as f64 / n as f64
        }
    }
}

/// Fits `kind` on `template` and attaches `threshold`.
pub fn train(
    kind: MatcherKind,
    template: &Template,
    scheme: WeightScheme,
    threshold: f64,
) -> Result<TrainedMatcher> {
    Ok(TrainedMatcher {
        kind,
        scheme,
        model: MatcherModel::fit(kind, template, scheme)?,
        threshold,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneClassSolution {
    pub alpha: Vec<f64>,
    pub w: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub kkt_violation: f64,
}

/// Solves the one-class SVM dual with a linear kernel,
///
/// `min ½ αᵀKα  s.t.  Σα = 1,  0 ≤ α_i ≤ upper[i]`,
///
/// by SMO over maximal-violating pairs. The offset `ρ` is the mean gradient
/// over free multipliers, or the midpoint of the feasible KKT interval when
/// every multiplier sits at a bound.
pub fn solve_one_class(
    points: &[&[f64]],
    upper: &[f64],
    tol: f64,
    max_iterations: usize,
) -> Result<OneClassSolution> {
    let n = points.len();
    if n == 0 {
        return Err(Error::EmptyTemplate);
    }
    assert_eq!(upper.len(), n);
    let capacity: f64 = upper.iter().sum();
    if capacity < 1.0 - 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "box constraints sum to {capacity} < 1"
        )));
    }
    let mut kernel = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let k = linalg::dot(points[i], points[j]);
            kernel[i * n + j] = k;
            kernel[j * n + i] = k;
        }
    }

    let mut alpha = vec![0.0; n];
    let mut remaining = 1.0;
    for (a, &c) in alpha.iter_mut().zip(upper) {
        if remaining <= 0.0 {
            break;
        }
        let v = c.min(remaining);
        *a = v;
        remaining -= v;
    }
    let mut grad: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| kernel[i * n + j] * alpha[j]).sum())
        .collect();

    let slack = |c: f64| 1e-14 * c.max(1.0);
    let mut iterations = 0;
    let mut violation;
    loop {
        let mut up: Option<usize> = None;
        let mut low: Option<usize> = None;
        for k in 0..n {
            if alpha[k] < upper[k] - slack(upper[k]) && up.is_none_or(|i| grad[k] < grad[i]) {
                up = Some(k);
            }
            if alpha[k] > slack(upper[k]) && low.is_none_or(|j| grad[k] > grad[j]) {
                low = Some(k);
            }
        }
        violation = match (up, low) {
            (Some(i), Some(j)) => grad[j] - grad[i],
            _ => 0.0,
        };
        if violation <= tol {
            break;
        }
        if iterations >= max_iterations {
            return Err(Error::SolverNonConvergence {
                iterations,
                kkt_violation: violation,
            });
        }
        let (i, j) = (up.unwrap(), low.unwrap());
        let eta = (kernel[i * n + i] + kernel[j * n + j] - 2.0 * kernel[i * n + j]).max(1e-12);
        let mut t = (grad[j] - grad[i]) / eta;
        let room_i = upper[i] - alpha[i];
        let mut snap_i = false;
        let mut snap_j = false;
        if t >= room_i {
            t = room_i;
            snap_i = true;
        }
        if t >= alpha[j] {
            t = alpha[j];
            snap_j = true;
            snap_i = false;
        }
        alpha[i] = if snap_i { upper[i] } else { alpha[i] + t };
        alpha[j] = if snap_j { 0.0 } else { alpha[j] - t };
        for k in 0..n {
            grad[k] += t * (kernel[k * n + i] - kernel[k * n + j]);
        }
        iterations += 1;
    }

    let mut free_sum = 0.0;
    let mut free_n = 0usize;
    let mut lower_bound = f64::NEG_INFINITY; // max grad over α at upper bound
    let mut upper_bound = f64::INFINITY; // min grad over α at zero
    for k in 0..n {
        let at_upper = alpha[k] >= upper[k] - slack(upper[k]);
        let at_zero = alpha[k] <= slack(upper[k]);
        if at_upper && !at_zero {
            lower_bound = lower_bound.max(grad[k]);
        } else if at_zero && !at_upper {
            upper_bound = upper_bound.min(grad[k]);
        } else if !at_upper && !at_zero {
            free_sum += grad[k];
            free_n += 1;
        }
    }
    let rho = if free_n > 0 {
        free_sum / free_n as f64
    } else if lower_bound.is_finite() && upper_bound.is_finite() {
        0.5 * (lower_bound + upper_bound)
    } else if lower_bound.is_finite() {
        lower_bound
    } else {
        upper_bound
    };

    let dim = points[0].len();
    let mut w = vec![0.0; dim];
    for (p, &a) in points.iter().zip(&alpha) {
        if a != 0.0 {
            for (wi, pi) in w.iter_mut().zip(p.iter()) {
                *wi += a * pi;
            }
        }
    }
    Ok(OneClassSolution {
        alpha,
        w,
        rho,
        iterations,
        kkt_violation: violation,
    })
}

/// Operating point chosen by [`calibrate_threshold_at_eer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub threshold: f64,
    pub eer: f64,
    pub far: f64,
    pub frr: f64,
}

/// Candidate thresholds: `-∞`, midpoints between consecutive distinct values
/// of the merged score set, and `+∞`.
pub fn candidate_thresholds(genuine: &[f64], impostor: &[f64]) -> Vec<f64> {
    let mut merged: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    merged.sort_by(f64::total_cmp);
    merged.dedup();
    let mut out = Vec::with_capacity(merged.len() + 1);
    out.push(f64::NEG_INFINITY);
    for w in merged.windows(2) {
        let mut mid = 0.5 * (w[0] + w[1]);
        if mid <= w[0] {
            mid = w[1];
        }
        out.push(mid);
    }
    out.push(f64::INFINITY);
    out
}

/// Sweeps every candidate threshold (accept iff `score >= threshold`) and
/// returns the one minimizing `max(FAR, FRR)`; ties go to the lower, more
/// permissive threshold. The reported EER is `(FAR + FRR) / 2` there.
pub fn calibrate_threshold_at_eer(genuine: &[f64], impostor: &[f64]) -> Result<EerPoint> {
    if genuine.is_empty() {
        return Err(Error::EmptySet("genuine"));
    }
    if impostor.is_empty() {
        return Err(Error::EmptySet("impostor"));
    }
    let mut g = genuine.to_vec();
    let mut imp = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let (ng, ni) = (g.len() as u128, imp.len() as u128);

    let mut best: Option<(u128, f64, u128, u128)> = None;
    for t in candidate_thresholds(&g, &imp) {
        let false_rejects = g.partition_point(|&s| s < t) as u128;
        let false_accepts = (imp.len() - imp.partition_point(|&s| s < t)) as u128;
        // max(FA/ni, FR/ng) on the common denominator ni*ng
        let cost = (false_accepts * ng).max(false_rejects * ni);
        if best.is_none_or(|(c, ..)| cost < c) {
            best = Some((cost, t, false_accepts, false_rejects));
        }
    }
    let (_, threshold, fa, fr) = best.unwrap();
    let far = fa as f64 / ni as f64;
    let frr = fr as f64 / ng as f64;
    Ok(EerPoint {
        threshold,
        eer: 0.5 * (far + frr),
        far,
        frr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmpl(rows: &[&[f64]]) -> Template {
        Template::enrolled(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn flat_and_sigmoid_weights() {
        assert_eq!(compute_weights(4, WeightScheme::Flat), vec![1.0; 4]);
        let w = compute_weights(2, WeightScheme::Sigmoid);
        assert!((w[0] - 1.0 / (1.0 + libm::exp(5.0))).abs() < 1e-15);
        assert!((w[0] - 0.006692850924284856).abs() < 1e-12);
        assert!((w[1] - 0.9933071490757153).abs() < 1e-12);
        assert_eq!(compute_weights(3, WeightScheme::Sigmoid)[1], 0.5);
        assert_eq!(
            compute_weights(1, WeightScheme::Sigmoid),
            vec![sigmoid(5.0)]
        );
    }

    #[test]
    fn centroid_flat_and_weighted() {
        let t = tmpl(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let m = MatcherModel::fit(MatcherKind::Centroid, &t, WeightScheme::Flat).unwrap();
        assert_eq!(
            m,
            MatcherModel::Centroid {
                center: vec![1.0, 0.0]
            }
        );
        let c = linalg::weighted_mean(t.embeddings(), &[1.0, 3.0]);
        assert_eq!(c, vec![1.5, 0.0]);
    }

    #[test]
    fn centroid_and_maximum_scores_are_zero_on_reference() {
        let t = tmpl(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let c = train(MatcherKind::Centroid, &t, WeightScheme::Flat, -1.0).unwrap();
        assert_eq!(c.score(&[1.0, 0.0]).unwrap(), 0.0);
        let m = train(MatcherKind::Maximum, &t, WeightScheme::Flat, -1.0).unwrap();
        assert_eq!(m.score(&[2.0, 0.0]).unwrap(), 0.0);
        assert!(m.score(&[1.0, 0.0]).unwrap() < 0.0);
        assert!(c.score(&[1.0]).is_err());
    }

    #[test]
    fn maximum_inflates_old_entries() {
        let t = tmpl(&[&[0.0, 0.0], &[4.0, 0.0]]);
        let m = MatcherModel::fit(MatcherKind::Maximum, &t, WeightScheme::Sigmoid).unwrap();
        let w = compute_weights(2, WeightScheme::Sigmoid);
        assert!((m.score_unchecked(&[1.0, 0.0]) + (3.0 / w[1])).abs() < 1e-12);
    }

    #[test]
    fn svm_dual_is_feasible_and_separates_far_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec<f64>> = (0..12)
            .map(|_| {
                vec![
                    1.0 + 0.1 * rng.random::<f64>(),
                    1.0 + 0.1 * rng.random::<f64>(),
                ]
            })
            .collect();
        let t = Template::enrolled(pts).unwrap();
        for nu in [0.1, 0.5, 1.0] {
            let m = train(MatcherKind::OcSvm { nu }, &t, WeightScheme::Flat, 0.0).unwrap();
            let MatcherModel::OcSvm { alpha, .. } = &m.model else {
                unreachable!()
            };
            let sum: f64 = alpha.iter().sum();
            assert!((sum - 1.0).abs() < 1e-8);
            let cap = 1.0 / (nu * 12.0);
            assert!(alpha.iter().all(|&a| a >= 0.0 && a <= cap + 1e-8));
            assert!(m.score(&[0.0, 0.0]).unwrap() < 0.0);
        }
    }

    #[test]
    fn svm_rejects_infeasible_nu() {
        let t = tmpl(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(MatcherModel::fit(MatcherKind::OcSvm { nu: 0.2 }, &t, WeightScheme::Flat).is_err());
        assert!(MatcherModel::fit(MatcherKind::OcSvm { nu: 0.5 }, &t, WeightScheme::Flat).is_ok());
    }

    #[test]
    fn eer_separable_and_inverted() {
        let p = calibrate_threshold_at_eer(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!(p.threshold > 0.0 && p.threshold < 1.0);
        assert_eq!(p.eer, 0.0);
        let q = calibrate_threshold_at_eer(&[0.0], &[1.0]).unwrap();
        assert_eq!(q.eer, 0.5);
        assert_eq!(q.threshold, f64::NEG_INFINITY);
        assert_eq!(
            calibrate_threshold_at_eer(&[], &[1.0]),
            Err(Error::EmptySet("genuine"))
        );
    }

    #[test]
    fn template_order_and_rollback_rules() {
        let mut t = tmpl(&[&[0.0], &[1.0]]);
        assert!(t.push(vec![2.0], 1, Origin::SelfUpdate).is_err());
        t.push(vec![2.0], 5, Origin::SelfUpdate).unwrap();
        t.push(vec![3.0], 6, Origin::SelfUpdate).unwrap();
        assert_eq!(
            t.remove_last_self_updates(3),
            Err(Error::RollbackExceeds {
                requested: 3,
                available: 2
            })
        );
        let removed = t.remove_last_self_updates(2).unwrap();
        assert_eq!(removed[0].embedding, vec![2.0]);
        assert_eq!(t.len(), 2);
        assert!(Template::enrolled(vec![]).is_err());
    }
}
