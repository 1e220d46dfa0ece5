//! Angular-similarity poisoning detection, the sanitization-hypersphere
//! baseline and synthetic legitimate-variation sequences.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::feature_space::{self, FeatureExtractor, PopulationDataset};
use crate::linalg;
use crate::matchers::{self, EerPoint};
use crate::seed::{self, stream};
use crate::{Embedding, Error, Result};

/// Direction of a template update, `centroid - sample`.
pub fn update_direction(centroid: &[f64], sample: &[f64]) -> Vec<f64> {
    linalg::sub(centroid, sample)
}

/// Cosine of the angle between two update directions, clamped to `[-1, 1]`.
pub fn cos_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (linalg::norm(a), linalg::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedDirection);
    }
    Ok((linalg::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariationFactor {
    Age,
    Pose,
    Accessory,
    FacialVariation,
}

impl VariationFactor {
    pub const ALL: [VariationFactor; 4] = [
        VariationFactor::Age,
        VariationFactor::Pose,
        VariationFactor::Accessory,
        VariationFactor::FacialVariation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            VariationFactor::Age => "age",
            VariationFactor::Pose => "pose",
            VariationFactor::Accessory => "accessory",
            VariationFactor::FacialVariation => "facial_variation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SequenceLabel {
    Legitimate { factor: VariationFactor },
    Poisoning,
}

/// Ordered template updates of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateSequence {
    pub label: SequenceLabel,
    pub user_id: u32,
    pub embeddings: Vec<Embedding>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub cos_threshold: f64,
    #[serde(default = "one")]
    pub consecutive_flags_to_alarm: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub threshold: f64,
    /// Cosine of pair `(i, i + 1)`; `None` when a direction is zero.
    pub cosines: Vec<Option<f64>>,
    /// Pair indices whose cosine reached the threshold.
    pub flagged: Vec<usize>,
    pub alarm: bool,
    /// Sequence index of the update that raised the alarm.
    pub alarm_index: Option<usize>,
}

/// Update directions of `embeddings` against a flat centroid that starts at
/// `initial_centroid` (built from `template_size` entries) and absorbs every
/// update in turn.
pub fn evolving_directions(
    embeddings: &[Embedding],
    initial_centroid: &[f64],
    template_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut centroid = initial_centroid.to_vec();
    let mut count = template_size as f64;
    let mut out = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        if e.len() != centroid.len() {
            return Err(Error::DimensionMismatch {
                expected: centroid.len(),
                found: e.len(),
            });
        }
        out.push(update_direction(&centroid, e));
        for (c, v) in centroid.iter_mut().zip(e) {
            *c = (*c * count + v) / (count + 1.0);
        }
        count += 1.0;
    }
    Ok(out)
}

/// Cosines of consecutive update directions; pairs with a zero direction are
/// `None`.
pub fn pair_cosines(
    embeddings: &[Embedding],
    initial_centroid: &[f64],
    template_size: usize,
) -> Result<Vec<Option<f64>>> {
    let dirs = evolving_directions(embeddings, initial_centroid, template_size)?;
    Ok(dirs
        .windows(2)
        .map(|w| cos_similarity(&w[0], &w[1]).ok())
        .collect())
}

/// Flags consecutive update pairs whose directions are too aligned.
pub fn detect(
    seq: &UpdateSequence,
    initial_centroid: &[f64],
    template_size: usize,
    cfg: &DetectorConfig,
) -> Result<DetectionReport> {
    if seq.embeddings.len() < 2 {
        return Err(Error::InvalidConfig(
            "an update sequence needs at least two entries".into(),
        ));
    }
    if cfg.consecutive_flags_to_alarm == 0 {
        return Err(Error::InvalidConfig(
            "consecutive_flags_to_alarm must be at least 1".into(),
        ));
    }
    let cosines = pair_cosines(&seq.embeddings, initial_centroid, template_size)?;
    let mut flagged = Vec::new();
    let mut run = 0usize;
    let mut alarm_index = None;
    for (i, c) in cosines.iter().enumerate() {
        match c {
            Some(c) if *c >= cfg.cos_threshold => {
                flagged.push(i);
                run += 1;
                if run >= cfg.consecutive_flags_to_alarm && alarm_index.is_none() {
                    alarm_index = Some(i + 1);
                }
            }
            Some(_) => run = 0,
            None => {}
        }
    }
    Ok(DetectionReport {
        threshold: cfg.cos_threshold,
        cosines,
        flagged,
        alarm: alarm_index.is_some(),
        alarm_index,
    })
}

/// EER threshold with poisoning pairs as the positive class: FAR is the
/// share of legitimate pairs flagged, FRR the share of poisoning pairs missed.
pub fn calibrate_detector(legit: &[f64], poison: &[f64]) -> Result<EerPoint> {
    if legit.is_empty() {
        return Err(Error::EmptySet("legitimate cosine"));
    }
    if poison.is_empty() {
        return Err(Error::EmptySet("poisoning cosine"));
    }
    matchers::calibrate_threshold_at_eer(poison, legit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypersphereVerdict {
    /// Index (among the accepted updates) at which a window first left the
    /// sphere; that window is reverted.
    pub revert_at: Option<usize>,
    /// First update of the reverted window.
    pub window_start: Option<usize>,
}

/// Running centroids after each accepted update, starting with the initial one.
pub fn centroid_path(
    updates: &[&[f64]],
    initial_centroid: &[f64],
    template_size: usize,
) -> Vec<Vec<f64>> {
    let mut path = vec![initial_centroid.to_vec()];
    let mut count = template_size as f64;
    for u in updates {
        let last = path.last().unwrap();
        let next = last
            .iter()
            .zip(u.iter())
            .map(|(c, v)| (c * count + v) / (count + 1.0))
            .collect();
        path.push(next);
        count += 1.0;
    }
    path
}

/// Sanitization hypersphere: reverts the first window of up to `k` accepted
/// updates that carries the running centroid more than `radius` away from
/// the centroid before the window.
pub fn sanitize_hypersphere(
    updates: &[&[f64]],
    initial_centroid: &[f64],
    template_size: usize,
    k: usize,
    radius: f64,
) -> Result<HypersphereVerdict> {
    if k == 0 {
        return Err(Error::InvalidConfig(
            "hypersphere window k must be at least 1".into(),
        ));
    }
    for u in updates {
        if u.len() != initial_centroid.len() {
            return Err(Error::DimensionMismatch {
                expected: initial_centroid.len(),
                found: u.len(),
            });
        }
    }
    let path = centroid_path(updates, initial_centroid, template_size);
    for t in 1..path.len() {
        let s = t.saturating_sub(k);
        if linalg::distance(&path[t], &path[s]) > radius {
            return Ok(HypersphereVerdict {
                revert_at: Some(t - 1),
                window_start: Some(s),
            });
        }
    }
    Ok(HypersphereVerdict {
        revert_at: None,
        window_start: None,
    })
}

/// Largest centroid displacement over any window of up to `k` updates.
pub fn max_window_drift(
    updates: &[&[f64]],
    initial_centroid: &[f64],
    template_size: usize,
    k: usize,
) -> f64 {
    let path = centroid_path(updates, initial_centroid, template_size);
    (1..path.len())
        .map(|t| linalg::distance(&path[t], &path[t.saturating_sub(k)]))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub factor: VariationFactor,
    /// Mean L2 norm of the raw-space offset.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationConfig {
    pub factors: Vec<FactorSpec>,
    pub sequences_per_factor: usize,
    pub sequence_length: usize,
    /// Relative per-sample jitter of the offset magnitude.
    pub scale_jitter: f64,
}

impl Default for VariationConfig {
    fn default() -> Self {
        Self {
            factors: vec![
                FactorSpec {
                    factor: VariationFactor::Age,
                    scale: 0.05,
                },
                FactorSpec {
                    factor: VariationFactor::Pose,
                    scale: 0.10,
                },
                FactorSpec {
                    factor: VariationFactor::Accessory,
                    scale: 0.15,
                },
                FactorSpec {
                    factor: VariationFactor::FacialVariation,
                    scale: 0.08,
                },
            ],
            sequences_per_factor: 10,
            sequence_length: 10,
            scale_jitter: 0.5,
        }
    }
}

/// Legitimate update sequences: for each requested factor and sequence, one
/// user from `users` (cycled), a fixed random raw-space direction, and
/// resampled test samples shifted along it by a per-sample magnitude, in
/// random order.
pub fn generate_variation_sequences(
    dataset: &PopulationDataset,
    extractor: &FeatureExtractor,
    users: &[u32],
    cfg: &VariationConfig,
    seed: u64,
) -> Result<Vec<UpdateSequence>> {
    dataset.require_raw()?;
    if users.is_empty() {
        return Err(Error::EmptySet("variation user"));
    }
    if cfg.sequence_length < 2 {
        return Err(Error::InvalidConfig(
            "sequence_length must be at least 2".into(),
        ));
    }
    let mut out = Vec::with_capacity(cfg.factors.len() * cfg.sequences_per_factor);
    for (fi, spec) in cfg.factors.iter().enumerate() {
        for s in 0..cfg.sequences_per_factor {
            let uid = users[s % users.len()];
            let user = dataset
                .user(uid)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown user {uid}")))?;
            let raw = user.raw.as_ref().ok_or(Error::UnsupportedMode(
                "variation sequences need raw samples",
            ))?;
            if user.test.is_empty() {
                return Err(Error::EmptySet("user test"));
            }
            let mut rng =
                seed::rng_from(seed, &[stream::VARIATION, fi as u64, s as u64, uid as u64]);
            let d = raw[0].len();
            let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let len = linalg::norm(&dir);
            dir.iter_mut().for_each(|v| *v /= len);
            let mut samples = Vec::with_capacity(cfg.sequence_length);
            for _ in 0..cfg.sequence_length {
                let idx = user.test[rng.random_range(0..user.test.len())];
                let mag = spec.scale
                    * (1.0 + cfg.scale_jitter * feature_space::uniform(&mut rng, -1.0, 1.0));
                let x: Vec<f64> = raw[idx]
                    .iter()
                    .zip(&dir)
                    .map(|(v, u)| (v + mag * u).clamp(0.0, 1.0))
                    .collect();
                samples.push(extractor.extract(&x)?);
            }
            samples.shuffle(&mut rng);
            out.push(UpdateSequence {
                label: SequenceLabel::Legitimate {
                    factor: spec.factor,
                },
                user_id: uid,
                embeddings: samples,
            });
        }
    }
    Ok(out)
}
