use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfrlf_core::envs::EnvConfig;
use rfrlf_core::evalkit::{
    iqm, normalized_iqm, read_episode_csv, returns_of, run_episodes, run_expert_episodes, summarize,
    write_episode_csv, write_summary_csv, EpisodeRecord,
};
use rfrlf_core::expertgen::Expert;
use rfrlf_core::rfsgpn::{Policy, PolicyArch};
use rfrlf_core::Error;

/// Repeat every value four times; the middle half of the result is then a whole
/// number of elements, so the plain mean of that slice is the inter-quartile mean.
fn iqm_by_replication(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().flat_map(|&x| [x; 4]).collect();
    v.sort_by(f64::total_cmp);
    let n = values.len();
    v[n..3 * n].iter().sum::<f64>() / (2 * n) as f64
}

#[test]
fn iqm_matches_the_replication_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let got = iqm(&v).unwrap();
        let want = iqm_by_replication(&v);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{v:?}: {got} vs {want}");
    }
}

#[test]
fn iqm_hand_examples() {
    assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
    assert_eq!(iqm(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
    assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap(), 4.5);
    assert_eq!(iqm(&[5.0]).unwrap(), 5.0);
    // outliers beyond the quartiles do not move it
    assert_eq!(iqm(&[-1e9, 2.0, 3.0, 1e9]).unwrap(), 2.5);
    assert!(matches!(iqm(&[]), Err(Error::Usage(_))));
}

#[test]
fn normalization_needs_a_positive_reference() {
    assert_eq!(normalized_iqm(&[1.0, 2.0, 3.0, 4.0], 5.0).unwrap(), 0.5);
    for r in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        assert!(matches!(normalized_iqm(&[1.0], r), Err(Error::Config(_))));
    }
    let s = summarize(&[1.0, 2.0, 3.0, 4.0], 2.5).unwrap();
    assert_eq!((s.n_episodes, s.max, s.mean, s.iqm, s.normalized_iqm), (4, 4.0, 2.5, 2.5, 1.0));
}

#[test]
fn episode_csv_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("episodes.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let recs: Vec<EpisodeRecord> = (0..37)
        .map(|i| EpisodeRecord {
            episode: i,
            ret: rng.gen_range(-50.0..500.0),
            steps: rng.gen_range(1..1000),
            mean_abs_ey: rng.gen_range(0.0..1.5),
        })
        .collect();
    write_episode_csv(&path, &recs).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("episode,return,steps,mean_abs_ey"));
    assert_eq!(text.lines().count(), 38);
    assert_eq!(read_episode_csv(&path).unwrap(), recs);
}

#[test]
fn summary_csv_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("summary.csv");
    write_summary_csv(&path, &summarize(&[1.0, 3.0], 2.0).unwrap()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n_episodes,max,mean,iqm,normalized_iqm,reference_return");
    assert_eq!(lines.len(), 2);
}

#[test]
fn evaluation_is_deterministic_and_shares_starts() {
    let env = EnvConfig::default().build().unwrap();
    let policy = Policy::init(PolicyArch::new(&env.state_shape(), &env.action_spec().blocks()), 3).unwrap();
    let a = run_episodes(&*env, &policy, 6, 11).unwrap();
    let b = run_episodes(&*env, &policy, 6, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|r| r.episode).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    assert!(a.iter().all(|r| r.steps >= 1 && r.steps <= env.step_limit()));

    let expert = Expert::for_env(&*env);
    let e1 = run_expert_episodes(&*env, &expert, 4, 11).unwrap();
    let e2 = run_expert_episodes(&*env, &expert, 4, 11).unwrap();
    assert_eq!(e1, e2);
    // the expert tracks the line; the untrained policy does not do better
    assert!(iqm(&returns_of(&e1)).unwrap() > iqm(&returns_of(&a)).unwrap());
}

proptest! {
    #[test]
    fn iqm_is_affine_equivariant(v in prop::collection::vec(-1e3f64..1e3, 1..40), a in 0.01f64..10.0, b in -100.0f64..100.0) {
        let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        let lhs = iqm(&w).unwrap();
        let rhs = a * iqm(&v).unwrap() + b;
        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
    }

    #[test]
    fn iqm_ignores_order(v in prop::collection::vec(-1e3f64..1e3, 1..40), seed in 0u64..1000) {
        let mut w = v.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(w.as_mut_slice(), &mut rng);
        prop_assert_eq!(iqm(&v).unwrap(), iqm(&w).unwrap());
    }

    #[test]
    fn iqm_lies_between_min_and_max(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let m = iqm(&v).unwrap();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
    }
}
