//! Prints calibration EERs and oracle-mode success rates for a configuration
//! file (or the defaults), to help choose benchmark parameters.
//!
//! `cargo run --release --example explore -- [config.toml] [pairs]`

use biobackdoor::pipeline::{self, Arm, World};
use biobackdoor::ExperimentConfig;
use biobackdoor_core::attack::AttackMode;
use biobackdoor_core::matchers::{MatcherKind, WeightScheme};
use biobackdoor_core::metrics::success_at;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = match args.get(1) {
        Some(p) if p != "-" => ExperimentConfig::load(p.as_ref())?,
        _ => ExperimentConfig::default(),
    };
    if let Some(n) = args.get(2) {
        cfg.pools.pairs = n.parse()?;
    }
    let world = World::build(&cfg)?;
    let pairs = pipeline::attack_pairs(&world)?;
    for scheme in [WeightScheme::Flat, WeightScheme::Sigmoid] {
        for kind in [
            MatcherKind::Centroid,
            MatcherKind::Maximum,
            MatcherKind::OcSvm { nu: 0.5 },
        ] {
            let arm = Arm { kind, scheme };
            let eer = pipeline::calibrate(&world, arm)?;
            let t = std::time::Instant::now();
            let runs = pipeline::sweep(
                &world,
                &pairs,
                arm,
                eer.threshold,
                &AttackMode::Oracle,
                None,
            )?;
            let n = runs.len() as f64;
            let s = |i| runs.iter().filter(|r| success_at(&r.result, i)).count() as f64 / n;
            let base_iar = runs.iter().map(|r| r.result.iar_trajectory[0]).sum::<f64>() / n;
            let ok: Vec<_> = runs.iter().filter(|r| r.result.success).collect();
            let delta = |t: fn(&biobackdoor_core::attack::AttackResult) -> &Vec<f64>| {
                ok.iter()
                    .map(|r| t(&r.result).last().unwrap() - t(&r.result)[0])
                    .sum::<f64>()
                    / ok.len().max(1) as f64
            };
            let dfrr = delta(|r| &r.frr_trajectory);
            let dfar = delta(|r| &r.far_trajectory);
            let mut inj: Vec<usize> = runs
                .iter()
                .map(|r| r.result.injections_to_success().unwrap_or(usize::MAX))
                .collect();
            inj.sort();
            println!(
                "{:<10} {:<8} eer={:.3} far={:.3} frr={:.3} dfrr={:+.3} dfar={:+.3} base_iar={:.3} s@1={:.2} s@3={:.2} s@10={:.2} median_inj={} stops={:?} ({:.1}s)",
                arm.label(),
                pipeline::scheme_name(scheme),
                eer.eer,
                eer.far,
                eer.frr,
                dfrr,
                dfar,
                base_iar,
                s(1),
                s(3),
                s(10),
                inj[inj.len() / 2],
                {
                    let mut m = std::collections::BTreeMap::new();
                    for r in &runs {
                        *m.entry(format!("{:?}", r.result.stop_reason)).or_insert(0) += 1;
                    }
                    m
                },
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
