//! Error rates of a system state and aggregation of attack runs.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attack::AttackResult;
use crate::matchers::TrainedMatcher;
use crate::{Embedding, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSnapshot {
    /// Share of other users' samples accepted.
    pub far: f64,
    /// Share of the victim's test samples rejected.
    pub frr: f64,
    /// Share of the attacker's unperturbed samples accepted.
    pub iar: f64,
    pub n_other: usize,
    pub n_victim: usize,
    pub n_attacker: usize,
}

pub fn snapshot_rates(
    matcher: &TrainedMatcher,
    victim_test: &[Embedding],
    attacker: &[Embedding],
    others: &[Embedding],
) -> Result<RateSnapshot> {
    if victim_test.is_empty() {
        return Err(Error::EmptySet("victim test"));
    }
    if attacker.is_empty() {
        return Err(Error::EmptySet("attacker"));
    }
    if others.is_empty() {
        return Err(Error::EmptySet("other users"));
    }
    let rate = |set: &[Embedding]| -> Result<f64> {
        let mut accepted = 0usize;
        for e in set {
            if matcher.decide(e)? {
                accepted += 1;
            }
        }
        Ok(accepted as f64 / set.len() as f64)
    };
    Ok(RateSnapshot {
        far: rate(others)?,
        frr: 1.0 - rate(victim_test)?,
        iar: rate(attacker)?,
        n_other: others.len(),
        n_victim: victim_test.len(),
        n_attacker: attacker.len(),
    })
}

/// Identifies the experiment arm a run belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub matcher: String,
    pub weighting: String,
    pub mode: String,
}

/// Whether `r` reached the goal after at most `i` accepted injections.
pub fn success_at(r: &AttackResult, i: usize) -> bool {
    r.success && r.injections_accepted <= i
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub key: GroupKey,
    pub injections: usize,
    pub success: f64,
    pub runs: usize,
}

/// Success fractions keyed by arm, one row per checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessTable {
    pub rows: Vec<SuccessRow>,
}

impl SuccessTable {
    pub fn get(&self, key: &GroupKey, injections: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| &r.key == key && r.injections == injections)
            .map(|r| r.success)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub key: GroupKey,
    pub iar: MeanStd,
    pub far: MeanStd,
    pub frr: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub table: SuccessTable,
    pub trajectories: Vec<TrajectoryStats>,
}

pub const DEFAULT_CHECKPOINTS: [usize; 3] = [1, 3, 10];

fn mean_std(series: &[&[f64]]) -> MeanStd {
    let len = series.iter().map(|s| s.len()).max().unwrap_or(0);
    let n = series.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut std = Vec::with_capacity(len);
    for t in 0..len {
        let at = |s: &&[f64]| s.get(t).or(s.last()).copied().unwrap_or(0.0);
        let m = series.iter().map(at).sum::<f64>() / n;
        let v = series
            .iter()
            .map(|s| (at(s) - m) * (at(s) - m))
            .sum::<f64>()
            / n;
        mean.push(m);
        std.push(libm::sqrt(v));
    }
    MeanStd { mean, std }
}

/// Groups runs by key; success fractions at each checkpoint and mean ± std
/// trajectories, with finished runs padded by their last value.
pub fn aggregate(results: &[(GroupKey, &AttackResult)], checkpoints: &[usize]) -> Aggregate {
    let mut groups: BTreeMap<&GroupKey, Vec<&AttackResult>> = BTreeMap::new();
    for (k, r) in results {
        groups.entry(k).or_default().push(r);
    }
    let mut rows = Vec::new();
    let mut trajectories = Vec::new();
    for (key, runs) in groups {
        for &i in checkpoints {
            let hits = runs.iter().filter(|r| success_at(r, i)).count();
            rows.push(SuccessRow {
                key: key.clone(),
                injections: i,
                success: hits as f64 / runs.len() as f64,
                runs: runs.len(),
            });
        }
        let pick = |f: fn(&AttackResult) -> &[f64]| -> MeanStd {
            let s: Vec<&[f64]> = runs.iter().map(|r| f(r)).collect();
            mean_std(&s)
        };
        trajectories.push(TrajectoryStats {
            key: key.clone(),
            iar: pick(|r| &r.iar_trajectory),
            far: pick(|r| &r.far_trajectory),
            frr: pick(|r| &r.frr_trajectory),
        });
    }
    Aggregate {
        table: SuccessTable { rows },
        trajectories,
    }
}
