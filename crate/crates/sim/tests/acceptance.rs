//! Benchmark acceptance run. Every criterion is evaluated on the frozen
//! default configuration and reported on its own line; the test fails if any
//! criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use biobackdoor::experiments::{self, CENTROID_FLAT};
use biobackdoor::pipeline::{self, Arm, PairRun, SurrogateKind, World};
use biobackdoor::ExperimentConfig;
use biobackdoor_core::attack::AttackMode;
use biobackdoor_core::matchers::{MatcherKind, WeightScheme};

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn arm(kind: MatcherKind, scheme: WeightScheme) -> Arm {
    Arm { kind, scheme }
}

const KINDS: [MatcherKind; 3] = [
    MatcherKind::Centroid,
    MatcherKind::Maximum,
    MatcherKind::OcSvm { nu: 0.5 },
];

fn gradient() -> Outcome {
    let t = Instant::now();
    let c = oracles::jacobian_check(100, 1e-5, 1);
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        name: "gradient correctness",
        pass: c.max_relative < 1e-5 && secs < 10.0,
        detail: format!(
            "max |J-fd|/max|J| = {:.2e} over {} draws (entry-wise worst {:.2e}), {secs:.2} s",
            c.max_relative, c.draws, c.max_entry_relative
        ),
    }
}

fn svm_bounds() -> Outcome {
    let nu = oracles::nu_check(&[0.1, 0.3, 0.5, 0.9], 50, 20, 3);
    let qp = oracles::qp_check(12, 2);
    Outcome {
        id: 2,
        name: "nu-SVM bounds",
        pass: nu.outlier_excess <= 0.0 && nu.sv_shortfall <= 0.0 && qp.max_gap < 1e-5,
        detail: format!(
            "{} sets: worst outlier excess {:+.3}, worst SV shortfall {:+.3}; QP gap {:.2e} on {} instances",
            nu.sets, nu.outlier_excess, nu.sv_shortfall, qp.max_gap, qp.instances
        ),
    }
}

fn eer_oracle() -> Outcome {
    let c = oracles::eer_check(100, 4);
    Outcome {
        id: 3,
        name: "EER oracle equivalence",
        pass: c.mismatches == 0,
        detail: format!("{} mismatches over {} score sets", c.mismatches, c.sets),
    }
}

fn effectiveness(flat: &[(Arm, Vec<PairRun>)], secs: f64) -> Outcome {
    let rates: Vec<f64> = flat
        .iter()
        .map(|(_, r)| experiments::success_rate(r, 10))
        .collect();
    let detail = flat
        .iter()
        .zip(&rates)
        .map(|((a, r), s)| format!("{} {s:.2} ({} pairs)", a.label(), r.len()))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome {
        id: 4,
        name: "attack effectiveness",
        pass: rates.iter().all(|&s| s >= 0.8) && secs < 300.0,
        detail: format!("success@10 {detail}; {secs:.1} s"),
    }
}

fn ordering(flat: &[(Arm, Vec<PairRun>)], sigmoid: &[(Arm, Vec<PairRun>)]) -> Outcome {
    let s1_centroid = experiments::success_rate(&flat[0].1, 1);
    let s1_maximum = experiments::success_rate(&flat[1].1, 1);
    let mut pass = s1_maximum > s1_centroid && flat.iter().all(|(_, r)| r.len() >= 100);
    let mut parts = vec![format!(
        "success@1 maximum {s1_maximum:.2} vs centroid {s1_centroid:.2}"
    )];
    for ((a, f), (_, s)) in flat.iter().zip(sigmoid) {
        let (sf, ss) = (
            experiments::success_rate(f, 3),
            experiments::success_rate(s, 3),
        );
        pass &= ss >= sf;
        parts.push(format!(
            "{} success@3 sigmoid {ss:.2} / flat {sf:.2}",
            a.label()
        ));
    }
    Outcome {
        id: 5,
        name: "matcher vulnerability ordering",
        pass,
        detail: parts.join("; "),
    }
}

fn stealth(runs: &[PairRun]) -> Outcome {
    let ok: Vec<_> = runs.iter().filter(|r| r.result.success).collect();
    let n = ok.len().max(1) as f64;
    let delta = |t: fn(&PairRun) -> &Vec<f64>| {
        ok.iter()
            .map(|r| t(r).last().unwrap() - t(r)[0])
            .sum::<f64>()
            / n
    };
    let dfrr = delta(|r| &r.result.frr_trajectory);
    let dfar = delta(|r| &r.result.far_trajectory);
    Outcome {
        id: 6,
        name: "stealthiness",
        pass: !ok.is_empty() && dfrr < 0.05 && dfar < 0.05,
        detail: format!(
            "{} successful runs: mean FRR change {dfrr:+.3}, mean FAR change {dfar:+.3}",
            ok.len()
        ),
    }
}

fn nu_trend(world: &World, pairs: &[pipeline::PairAssignment]) -> Outcome {
    let points = experiments::nu_sweep(world, pairs, &[0.1, 0.3, 0.5, 0.7, 0.9]).unwrap();
    let m: Vec<f64> = points.iter().map(|p| p.median_injections).collect();
    let monotone = m.windows(2).all(|w| w[0] <= w[1]);
    let ratio = m[4] / m[0];
    Outcome {
        id: 7,
        name: "nu resilience trend",
        pass: monotone && ratio >= 1.5,
        detail: format!("medians {m:?}, nu=0.9 / nu=0.1 = {ratio:.2}"),
    }
}

fn heuristic_value(world: &World, pairs: &[pipeline::PairAssignment]) -> Outcome {
    let c = experiments::heuristic_comparison(world, pairs, CENTROID_FLAT).unwrap();
    let ratio = c.heuristic.failures_per_injection / c.iterative.failures_per_injection;
    Outcome {
        id: 8,
        name: "heuristic value",
        pass: ratio <= 0.5 && c.heuristic.first_pick_acceptance >= 0.7,
        detail: format!(
            "failures/injection heuristic {:.3} vs iterative {:.3} (ratio {ratio:.2}); first-pick acceptance {:.1}%",
            c.heuristic.failures_per_injection,
            c.iterative.failures_per_injection,
            100.0 * c.heuristic.first_pick_acceptance
        ),
    }
}

fn transfer(world: &World, pairs: &[pipeline::PairAssignment]) -> Outcome {
    let mut same = 0.0;
    let mut surrogate = 0.0;
    let mut parts = Vec::new();
    for kind in KINDS {
        let a = arm(kind, WeightScheme::Flat);
        let gap = experiments::transfer_gap(world, pairs, a).unwrap();
        let s = |k: SurrogateKind| {
            gap.surrogates
                .iter()
                .find(|p| p.surrogate == k)
                .unwrap()
                .success_at_10
        };
        same += gap.same_model_success_at_10;
        surrogate += s(SurrogateKind::IndependentSeed);
        parts.push(format!(
            "{} same {:.2} / independent seed {:.2} / unrelated {:.2} / related {:.2}",
            a.label(),
            gap.same_model_success_at_10,
            s(SurrogateKind::IndependentSeed),
            s(SurrogateKind::UnrelatedArchitecture),
            s(SurrogateKind::Related)
        ));
    }
    same /= KINDS.len() as f64;
    surrogate /= KINDS.len() as f64;
    Outcome {
        id: 9,
        name: "transferability gap",
        pass: surrogate < same && same >= 5.0 * surrogate,
        detail: format!(
            "pooled success@10 same {same:.3} vs independent-seed surrogate {surrogate:.3} ({:.1}x); {}",
            same / surrogate,
            parts.join("; ")
        ),
    }
}

fn detection(world: &World, runs: &[PairRun]) -> Outcome {
    let s = experiments::cosine_detection(world, runs).unwrap().summary;
    Outcome {
        id: 10,
        name: "detection",
        pass: s.calibration.eer < 0.15
            && s.early_alarm_rate >= 0.95
            && s.rollbacks_restored == s.rollbacks,
        detail: format!(
            "EER {:.3}; early alarms {}/{} ({:.1}%); rollbacks restored {}/{}",
            s.calibration.eer,
            s.early_alarms,
            s.runs,
            100.0 * s.early_alarm_rate,
            s.rollbacks_restored,
            s.rollbacks
        ),
    }
}

fn cli(dir: &Path, jobs: &str, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_biobackdoor"))
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .args(["--out", dir.to_str().unwrap(), "--jobs", jobs])
        .args(args)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    cli(&a, "4", &["gen-data"]);
    cli(&a, "4", &["calibrate"]);
    cli(&a, "4", &["fit-heuristic"]);
    cli(&a, "4", &["attack", "--mode", "heuristic"]);
    cli(&a, "4", &["attack", "--mode", "oracle"]);
    cli(&a, "4", &["attack", "--mode", "transfer", "--pairs", "20"]);
    cli(&a, "4", &["detect", "--detector", "cosine"]);
    cli(&a, "4", &["detect", "--detector", "hypersphere"]);
    cli(&a, "4", &["report"]);
    let manifest = a.join("manifest.json");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    cli(
        &b,
        "1",
        &["replay", "--manifest", manifest.to_str().unwrap()],
    );
    cli(
        &c,
        "3",
        &["replay", "--manifest", manifest.to_str().unwrap()],
    );
    let (tb, tc) = (tree(&b), tree(&c));
    let differing: Vec<_> = tb
        .keys()
        .chain(tc.keys())
        .filter(|k| tb.get(*k) != tc.get(*k))
        .cloned()
        .collect();
    let ta = tree(&a);
    let original_match = ta
        .iter()
        .all(|(k, v)| k == "manifest.json" || tb.get(k) == Some(v));
    Outcome {
        id: 11,
        name: "determinism",
        pass: differing.is_empty() && original_match && tb.len() == ta.len(),
        detail: format!(
            "{} files replayed twice from one manifest, {} differ; original run {}",
            tb.len(),
            differing.len(),
            if original_match {
                "reproduced"
            } else {
                "not reproduced"
            }
        ),
    }
}

#[test]
fn acceptance() {
    let mut outcomes = vec![gradient(), svm_bounds(), eer_oracle()];

    let cfg = ExperimentConfig::default();
    let world = World::build(&cfg).unwrap();
    let pairs = pipeline::attack_pairs(&world).unwrap();

    let t = Instant::now();
    let flat: Vec<(Arm, Vec<PairRun>)> = KINDS
        .iter()
        .map(|&k| {
            let a = arm(k, WeightScheme::Flat);
            (
                a,
                experiments::run_arm(&world, &pairs, a, &AttackMode::Oracle)
                    .unwrap()
                    .1,
            )
        })
        .collect();
    let flat_secs = t.elapsed().as_secs_f64();
    let sigmoid: Vec<(Arm, Vec<PairRun>)> = KINDS
        .iter()
        .map(|&k| {
            let a = arm(k, WeightScheme::Sigmoid);
            (
                a,
                experiments::run_arm(&world, &pairs, a, &AttackMode::Oracle)
                    .unwrap()
                    .1,
            )
        })
        .collect();

    outcomes.push(effectiveness(&flat, flat_secs));
    outcomes.push(ordering(&flat, &sigmoid));
    outcomes.push(stealth(&flat[0].1));
    outcomes.push(nu_trend(&world, &pairs));
    outcomes.push(heuristic_value(&world, &pairs));
    outcomes.push(transfer(&world, &pairs));
    outcomes.push(detection(&world, &flat[0].1));
    outcomes.push(determinism());

    for o in &outcomes {
        println!(
            "criterion {:>2} {:<32} {}  {}",
            o.id,
            o.name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
