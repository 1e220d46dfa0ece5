//! Independent reference implementations used to check the core crate:
//! central finite differences, an exhaustive active-set QP solver and an
//! exhaustive EER sweep.

#![allow(dead_code, clippy::needless_range_loop)]

use biobackdoor_core::feature_space::{ExtractorSpec, FeatureExtractor};
use biobackdoor_core::matchers::{
    self, solve_one_class, MatcherKind, MatcherModel, Template, SVM_TOLERANCE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference Jacobian, row-major `d_emb × d_in`.
pub fn fd_jacobian(f: &FeatureExtractor, x: &[f64], h: f64) -> Vec<f64> {
    let (m, n) = (f.output_dim(), f.input_dim());
    let mut out = vec![0.0; m * n];
    for c in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[c] += h;
        xm[c] -= h;
        let step = xp[c] - xm[c];
        let fp = f.extract(&xp).unwrap();
        let fm = f.extract(&xm).unwrap();
        for r in 0..m {
            out[r * n + c] = (fp[r] - fm[r]) / step;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct JacobianCheck {
    /// Largest `|J - J_fd|` over the largest `|J|` entry, worst draw.
    pub max_relative: f64,
    /// Largest `|J_ij - J_fd,ij| / max(|J_ij|, |J_fd,ij|)`, worst entry.
    pub max_entry_relative: f64,
    pub draws: usize,
}

/// Random architectures, weights and inputs; finite-difference step `h`.
pub fn jacobian_check(draws: usize, h: f64, seed: u64) -> JacobianCheck {
    let mut r = rng(seed);
    let widths = [vec![32, 24], vec![16], vec![48, 32], vec![24, 24, 16]];
    let mut worst = 0.0f64;
    let mut worst_entry = 0.0f64;
    for d in 0..draws {
        let spec = ExtractorSpec {
            hidden: widths[d % widths.len()].clone(),
            l2_normalize: d % 5 != 4,
            ..ExtractorSpec::default()
        };
        let f = FeatureExtractor::random(&spec, r.random()).unwrap();
        let x: Vec<f64> = (0..spec.d_in).map(|_| r.random::<f64>()).collect();
        let j = f.jacobian(&x).unwrap();
        let fd = fd_jacobian(&f, &x, h);
        let scale = j.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut err = 0.0f64;
        for (a, b) in j.data.iter().zip(&fd) {
            let e = (a - b).abs();
            err = err.max(e);
            let denom = a.abs().max(b.abs());
            if denom > 0.0 {
                worst_entry = worst_entry.max(e / denom);
            }
        }
        worst = worst.max(err / scale);
    }
    JacobianCheck {
        max_relative: worst,
        max_entry_relative: worst_entry,
        draws,
    }
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[p][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, p);
        b.swap(col, p);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

pub fn dual_objective(points: &[Vec<f64>], alpha: &[f64]) -> f64 {
    let d = points[0].len();
    let mut w = vec![0.0; d];
    for (p, a) in points.iter().zip(alpha) {
        for (wi, pi) in w.iter_mut().zip(p) {
            *wi += a * pi;
        }
    }
    0.5 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Exact minimum of `½ αᵀKα` (linear kernel) subject to `Σα = 1` and
/// `0 ≤ α_i ≤ upper_i`, by enumerating every assignment of the multipliers
/// to {zero, upper bound, free} and solving the equality-constrained problem
/// on the free set. Needs a nonsingular kernel on every free subset.
pub fn qp_exhaustive(points: &[Vec<f64>], upper: &[f64]) -> f64 {
    let n = points.len();
    let k =
        |i: usize, j: usize| -> f64 { points[i].iter().zip(&points[j]).map(|(a, b)| a * b).sum() };
    let mut best = f64::INFINITY;
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut state = vec![0u8; n];
        let mut c = code;
        for s in state.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let at_upper: Vec<usize> = (0..n).filter(|&i| state[i] == 1).collect();
        let fixed_sum: f64 = at_upper.iter().map(|&i| upper[i]).sum();
        let mut alpha = vec![0.0; n];
        for &i in &at_upper {
            alpha[i] = upper[i];
        }
        if free.is_empty() {
            if (fixed_sum - 1.0).abs() > 1e-12 {
                continue;
            }
        } else {
            let m = free.len();
            let mut a = vec![vec![0.0; m + 1]; m + 1];
            let mut b = vec![0.0; m + 1];
            for (r, &i) in free.iter().enumerate() {
                for (c, &j) in free.iter().enumerate() {
                    a[r][c] = k(i, j);
                }
                a[r][m] = 1.0;
                a[m][r] = 1.0;
                b[r] = -at_upper.iter().map(|&j| k(i, j) * upper[j]).sum::<f64>();
            }
            b[m] = 1.0 - fixed_sum;
            let Some(sol) = solve_dense(a, b) else {
                continue;
            };
            let feasible = free
                .iter()
                .zip(&sol)
                .all(|(&i, &v)| v >= -1e-12 && v <= upper[i] + 1e-12);
            if !feasible {
                continue;
            }
            for (&i, &v) in free.iter().zip(&sol) {
                alpha[i] = v;
            }
        }
        best = best.min(dual_objective(points, &alpha));
    }
    best
}

pub fn gaussian_points(r: &mut ChaCha8Rng, n: usize, d: usize, offset: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|i| {
                    let g: f64 = StandardNormal.sample(r);
                    g * 0.3 + if i == 0 { offset } else { 0.0 }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct QpCheck {
    pub instances: usize,
    pub max_gap: f64,
}

/// Solver objective against [`qp_exhaustive`] on random 10-point instances
/// with flat and sigmoid box constraints.
pub fn qp_check(instances: usize, seed: u64) -> QpCheck {
    let mut r = rng(seed);
    let mut max_gap = 0.0f64;
    for t in 0..instances {
        let points = gaussian_points(&mut r, 10, 16, 1.0);
        let nu = [0.1, 0.3, 0.5, 0.9][t % 4];
        let scheme = if t % 2 == 0 {
            matchers::WeightScheme::Flat
        } else {
            matchers::WeightScheme::Sigmoid
        };
        let w = matchers::compute_weights(points.len(), scheme);
        let total: f64 = w.iter().sum();
        let upper: Vec<f64> = w.iter().map(|v| v / (nu * total)).collect();
        let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
        let sol = solve_one_class(&refs, &upper, SVM_TOLERANCE, 1_000_000).unwrap();
        let got = dual_objective(&points, &sol.alpha);
        let exact = qp_exhaustive(&points, &upper);
        max_gap = max_gap.max((got - exact).abs());
    }
    QpCheck { instances, max_gap }
}

#[derive(Debug, Clone, Copy)]
pub struct NuCheck {
    pub sets: usize,
    /// Largest `outlier fraction - (ν + 1/n)`; must be ≤ 0.
    pub outlier_excess: f64,
    /// Largest `(ν - 1/n) - SV fraction`; must be ≤ 0.
    pub sv_shortfall: f64,
}

/// ν-property on random point sets: outliers are points strictly outside
/// the margin (beyond the solver tolerance), support vectors have `α > 0`.
pub fn nu_check(nus: &[f64], sets: usize, n: usize, seed: u64) -> NuCheck {
    let mut r = rng(seed);
    let mut outlier_excess = f64::NEG_INFINITY;
    let mut sv_shortfall = f64::NEG_INFINITY;
    for &nu in nus {
        for _ in 0..sets {
            let points = gaussian_points(&mut r, n, 16, 1.0);
            let template = Template::enrolled(points.clone()).unwrap();
            let model = MatcherModel::fit(
                MatcherKind::OcSvm { nu },
                &template,
                matchers::WeightScheme::Flat,
            )
            .unwrap();
            let MatcherModel::OcSvm { alpha, w, rho, .. } = &model else {
                unreachable!()
            };
            let outliers = points
                .iter()
                .filter(|p| p.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - rho < -SVM_TOLERANCE)
                .count();
            let svs = alpha.iter().filter(|&&a| a > 0.0).count();
            let inv = 1.0 / n as f64;
            outlier_excess = outlier_excess.max(outliers as f64 / n as f64 - (nu + inv));
            sv_shortfall = sv_shortfall.max((nu - inv) - svs as f64 / n as f64);
        }
    }
    NuCheck {
        sets: nus.len() * sets,
        outlier_excess,
        sv_shortfall,
    }
}

/// Exhaustive EER sweep over the observed scores: accept iff
/// `score >= t`, minimize `max(FAR, FRR)`, lowest threshold on ties.
/// Returns `(threshold, far, frr)`.
pub fn eer_exhaustive(genuine: &[f64], impostor: &[f64]) -> (f64, f64, f64) {
    let mut ts: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    ts.push(f64::INFINITY);
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let (ng, ni) = (genuine.len(), impostor.len());
    let mut best: Option<(usize, f64, usize, usize)> = None;
    for t in ts {
        let fr = genuine.iter().filter(|&&s| s < t).count();
        let fa = impostor.iter().filter(|&&s| s >= t).count();
        let cost = (fa * ng).max(fr * ni);
        if best.is_none_or(|b| cost < b.0) {
            best = Some((cost, t, fa, fr));
        }
    }
    let (_, t, fa, fr) = best.unwrap();
    (t, fa as f64 / ni as f64, fr as f64 / ng as f64)
}

pub fn random_scores(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let ng = r.random_range(1..60);
    let ni = r.random_range(1..60);
    let ties = r.random_bool(0.5);
    let shift: f64 = r.random_range(-1.0..2.0);
    let mut draw = |mean: f64, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut *r);
                let v = mean + g;
                if ties {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
            .collect()
    };
    let g = draw(shift, ng);
    let i = draw(0.0, ni);
    (g, i)
}

#[derive(Debug, Clone, Copy)]
pub struct EerCheck {
    pub sets: usize,
    pub mismatches: usize,
}

/// Calibration against [`eer_exhaustive`]: identical FAR, FRR and EER, and
/// the same accept/reject decision for every observed score.
pub fn eer_check(sets: usize, seed: u64) -> EerCheck {
    let mut r = rng(seed);
    let mut mismatches = 0;
    for _ in 0..sets {
        let (g, i) = random_scores(&mut r);
        let got = matchers::calibrate_threshold_at_eer(&g, &i).unwrap();
        let (t, far, frr) = eer_exhaustive(&g, &i);
        let same_partition = g
            .iter()
            .chain(&i)
            .all(|&s| (s >= got.threshold) == (s >= t));
        if got.far != far || got.frr != frr || got.eer != 0.5 * (far + frr) || !same_partition {
            mismatches += 1;
        }
    }
    EerCheck { sets, mismatches }
}
