use biobackdoor::io;
use biobackdoor::pipeline::{self, Arm, World};
use biobackdoor::{ExperimentConfig, HarnessError};
use biobackdoor_core::attack::AttackMode;
use biobackdoor_core::feature_space::DatasetMode;
use biobackdoor_core::matchers::{MatcherKind, WeightScheme};
use proptest::prelude::*;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.pools.pairs = 12;
    cfg
}

const FLAT: [Arm; 3] = [
    Arm {
        kind: MatcherKind::Centroid,
        scheme: WeightScheme::Flat,
    },
    Arm {
        kind: MatcherKind::Maximum,
        scheme: WeightScheme::Flat,
    },
    Arm {
        kind: MatcherKind::OcSvm { nu: 0.5 },
        scheme: WeightScheme::Flat,
    },
];

#[test]
fn default_benchmark_is_accurate_before_attack() {
    let world = World::build(&ExperimentConfig::default()).unwrap();
    for arm in FLAT {
        let eer = pipeline::calibrate(&world, arm).unwrap();
        assert!(eer.eer < 0.05, "{} EER {}", arm.label(), eer.eer);
    }
}

#[test]
fn pools_are_disjoint() {
    let world = World::build(&ExperimentConfig::default()).unwrap();
    world.pools.check_disjoint().unwrap();
    let mut broken = world.pools.clone();
    broken.victims[0] = broken.attackers[0];
    assert!(matches!(
        broken.check_disjoint(),
        Err(HarnessError::Config(_))
    ));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = ExperimentConfig::default();
    let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(back, cfg);
    let err = ExperimentConfig::from_toml_str("[population]\nn_user = 3\n[mask]\nsize = 1\n")
        .unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("population.n_user") && msg.contains("mask.size"),
        "{msg}"
    );
}

#[test]
fn embedding_csv_round_trip_is_exact() {
    let world = World::build(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    io::write_embeddings_csv(&path, &world.dataset).unwrap();
    let back = io::read_embeddings_csv(&path).unwrap();
    assert_eq!(back.mode, DatasetMode::EmbeddingOnly);
    assert_eq!(back.d_emb, world.dataset.d_emb);
    assert_eq!(back.user_ids(), world.dataset.user_ids());
    for (a, b) in world.dataset.users.iter().zip(&back.users) {
        let bits = |v: Vec<Vec<f64>>| -> Vec<Vec<u64>> {
            v.into_iter()
                .map(|e| e.into_iter().map(f64::to_bits).collect())
                .collect()
        };
        assert_eq!(bits(a.train_embeddings()), bits(b.train_embeddings()));
        assert_eq!(bits(a.test_embeddings()), bits(b.test_embeddings()));
    }
}

#[test]
fn embedding_csv_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    std::fs::write(&path, "user_id,split,e0,e1\n4,train,0.5,0.25\n4,test,1,2\n").unwrap();
    let one = io::read_embeddings_csv(&path).unwrap();
    assert_eq!(one.users.len(), 1);
    assert_eq!(one.users[0].train.len(), 1);

    std::fs::write(&path, "user_id,split,e0,e1\n4,train,0.5,0.25\n5,train,1\n").unwrap();
    match io::read_embeddings_csv(&path) {
        Err(HarnessError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    std::fs::write(&path, "user_id,split,e0\n4,holdout,0.5\n").unwrap();
    assert!(matches!(
        io::read_embeddings_csv(&path),
        Err(HarnessError::Parse { line: 2, .. })
    ));
    std::fs::write(&path, "user_id,split,e0\n4,train,NaN\n").unwrap();
    assert!(matches!(
        io::read_embeddings_csv(&path),
        Err(HarnessError::Parse { line: 2, .. })
    ));
    std::fs::write(&path, "id,e0\n").unwrap();
    assert!(matches!(
        io::read_embeddings_csv(&path),
        Err(HarnessError::Parse { line: 1, .. })
    ));
}

#[test]
fn attack_runs_respect_gate_and_accounting() {
    let world = World::build(&small()).unwrap();
    let pairs = pipeline::attack_pairs(&world).unwrap();
    for arm in FLAT {
        let threshold = pipeline::calibrate(&world, arm).unwrap().threshold;
        let runs =
            pipeline::sweep(&world, &pairs, arm, threshold, &AttackMode::Iterative, None).unwrap();
        for r in &runs {
            let res = &r.result;
            assert_eq!(
                res.failures,
                res.injections_attempted - res.injections_accepted
            );
            assert_eq!(res.events.len(), res.injections_accepted);
            assert_eq!(res.iar_trajectory.len(), res.injections_accepted + 1);
            for e in &res.events {
                assert!(e.score >= threshold);
            }
            assert_eq!(r.system.threshold(), threshold);
            let restored = pipeline::restore_run(&world, &r.pair, arm, threshold, res).unwrap();
            assert_eq!(restored.system.template(), r.system.template());
        }
    }
}

#[test]
fn surrogate_equal_to_target_changes_nothing() {
    let world = World::build(&small()).unwrap();
    let pairs = pipeline::attack_pairs(&world).unwrap();
    let arm = FLAT[1];
    let t = pipeline::calibrate(&world, arm).unwrap().threshold;
    for p in pairs.iter().take(4) {
        let a = pipeline::run_pair(&world, p, arm, t, &AttackMode::Oracle, None).unwrap();
        let b = pipeline::run_pair(
            &world,
            p,
            arm,
            t,
            &AttackMode::Oracle,
            Some(&world.extractor),
        )
        .unwrap();
        assert_eq!(a.result, b.result);
    }
}

#[test]
fn sweeps_are_deterministic() {
    let cfg = small();
    let run = || {
        let world = World::build(&cfg).unwrap();
        let pairs = pipeline::attack_pairs(&world).unwrap();
        let t = pipeline::calibrate(&world, FLAT[0]).unwrap().threshold;
        pipeline::sweep(&world, &pairs, FLAT[0], t, &AttackMode::Oracle, None)
            .unwrap()
            .into_iter()
            .map(|r| r.result)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn embedding_csv_preserves_arbitrary_values(
        rows in prop::collection::vec((0u32..5, any::<bool>(), prop::collection::vec(-1e6f64..1e6, 3)), 1..20)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let mut text = String::from("user_id,split,e0,e1,e2\n");
        for (id, train, v) in &rows {
            text += &format!("{id},{},{},{},{}\n", if *train { "train" } else { "test" }, v[0], v[1], v[2]);
        }
        std::fs::write(&path, text).unwrap();
        let data = io::read_embeddings_csv(&path).unwrap();
        io::write_embeddings_csv(&path, &data).unwrap();
        let again = io::read_embeddings_csv(&path).unwrap();
        prop_assert_eq!(&data, &again);
        let n: usize = data.users.iter().map(|u| u.embeddings.len()).sum();
        prop_assert_eq!(n, rows.len());
    }
}
