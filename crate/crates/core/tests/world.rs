use procshift::world::{
    make_misordered_cf, make_missing_cf, make_sc_cf, CfKind, Dataset, StepSpec, World, WorldConfig,
};
use proptest::prelude::*;

fn small_config() -> WorldConfig {
    WorldConfig {
        n_train: 40,
        n_val: 10,
        n_test: 10,
        ..WorldConfig::default()
    }
}

fn generate_with_threads(threads: usize, cfg: &WorldConfig, seed: u64) -> Dataset {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| World::new(cfg.clone(), seed).unwrap().generate(seed).unwrap())
}

#[test]
fn generation_is_independent_of_thread_count() {
    let cfg = small_config();
    let one = generate_with_threads(1, &cfg, 11);
    let four = generate_with_threads(4, &cfg, 11);
    let again = generate_with_threads(3, &cfg, 11);
    assert_eq!(one, four);
    assert_eq!(one, again);
    let other = generate_with_threads(2, &cfg, 12);
    assert_ne!(one, other);
}

#[test]
fn default_world_invariants() {
    let cfg = WorldConfig::default();
    let world = World::new(cfg.clone(), 7).unwrap();
    let data = world.generate(7).unwrap();
    assert_eq!((data.train.len(), data.val.len(), data.test.len()), (300, 60, 60));

    let mut summaries = std::collections::HashSet::new();
    for r in data.train.iter().chain(&data.val).chain(&data.test) {
        let a = &r.activity;
        assert!((cfg.min_steps..=cfg.max_steps).contains(&a.len()));
        assert!(summaries.insert(a.summary_tokens.clone()), "duplicate summary");
        for w in a.steps.windows(2) {
            assert_eq!(w[0].after_state, w[1].before_state);
        }
        for s in &a.steps {
            assert!(!s.sc_cf_states.contains(&s.after_state));
            assert_ne!(s.before_state, s.after_state);
        }
        assert_eq!(r.cfs.len(), cfg.cfs_per_summary);
        for cf in &r.cfs {
            assert_ne!(cf.tokens, a.summary_tokens);
            match cf.kind {
                CfKind::MissingStep => assert_eq!(cf.tokens.len() + 1, a.summary_tokens.len()),
                CfKind::Misordered => {
                    let diff = cf.tokens.iter().zip(&a.summary_tokens).filter(|(x, y)| x != y).count();
                    assert_eq!(diff, 2);
                    let (mut x, mut y) = (cf.tokens.clone(), a.summary_tokens.clone());
                    x.sort_unstable();
                    y.sort_unstable();
                    assert_eq!(x, y);
                }
                CfKind::StateChange => panic!("video-level CF of state-change kind"),
            }
        }
        let v = &r.video;
        assert_eq!(v.clips.len(), a.len());
        assert_eq!(v.step_labels.len(), v.frame_count());
        assert!(v.error_flags.iter().all(|&f| !f));
    }
}

#[test]
fn prototypes_are_near_orthogonal() {
    let cfg = WorldConfig::default();
    let world = World::new(cfg.clone(), 5).unwrap();
    let protos: Vec<&[f64]> = (0..cfg.n_states).map(|s| world.prototype(s).unwrap()).collect();
    for i in 0..protos.len() {
        let n: f64 = protos[i].iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        for j in 0..i {
            let c: f64 = protos[i].iter().zip(protos[j]).map(|(a, b)| a * b).sum();
            assert!(c.abs() < 0.2, "states {i} and {j}: cosine {c}");
        }
    }
}

#[test]
fn zero_noise_frames_are_prototypes() {
    let world = World::new(small_config(), 2).unwrap();
    let a = world.gen_activity(0, 9, 5).unwrap();
    let v = world.render_video(&a, 4, 0.0, 4).unwrap();
    for (clip, step) in v.clips.iter().zip(&a.steps) {
        assert_eq!(clip[0], clip[1]);
        assert_eq!(clip[2], clip[3]);
        assert_ne!(clip[0], clip[2]);
        assert_eq!(clip[0].as_slice(), world.prototype(step.before_state).unwrap());
        assert_eq!(clip[3].as_slice(), world.prototype(step.after_state).unwrap());
    }
    let w1 = world.render_video(&a, 4, 0.1, 4).unwrap();
    let w2 = world.render_video(&a, 4, 0.1, 4).unwrap();
    assert_eq!(w1, w2);
}

#[test]
fn sc_cf_never_returns_the_outcome() {
    let world = World::new(small_config(), 3).unwrap();
    let mut checked = 0;
    for i in 0..2_000u64 {
        let a = world.gen_activity(i, i, 5).unwrap();
        for (j, step) in a.steps.iter().enumerate() {
            let s = make_sc_cf(step, i * 31 + j as u64).unwrap();
            assert_ne!(s, step.after_state);
            assert!(step.sc_cf_states.contains(&s));
            assert_eq!(s, make_sc_cf(step, i * 31 + j as u64).unwrap());
            checked += 1;
        }
    }
    assert!(checked >= 10_000);
    let single = StepSpec {
        action: 0,
        before_state: 1,
        after_state: 0,
        sc_cf_states: vec![7],
    };
    assert_eq!(make_sc_cf(&single, 123).unwrap(), 7);
}

#[test]
fn missing_and_misordered_examples() {
    let world = World::new(small_config(), 3).unwrap();
    let mut a = world.gen_activity(0, 1, 5).unwrap();
    a.summary_tokens = vec![10, 11, 12];
    assert_eq!(make_missing_cf(&a, 1).unwrap().tokens, vec![10, 12]);
    assert!(make_missing_cf(&a, 3).is_err());
    let m = make_misordered_cf(&a, 0, 1).unwrap();
    assert_eq!(m.tokens, vec![11, 10, 12]);
    assert_eq!(m.kind, CfKind::Misordered);
    assert!(make_misordered_cf(&a, 0, 0).is_err());
    a.summary_tokens = vec![10, 10, 12];
    assert!(make_misordered_cf(&a, 0, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_activities_chain(seed in any::<u64>(), n in 5usize..=8) {
        let world = World::new(small_config(), 1).unwrap();
        let a = world.gen_activity(0, seed, n).unwrap();
        prop_assert_eq!(a.len(), n);
        for w in a.steps.windows(2) {
            prop_assert_eq!(w[0].after_state, w[1].before_state);
        }
    }

    #[test]
    fn error_flags_cover_exactly_the_late_halves(seed in any::<u64>(), mask in proptest::collection::vec(any::<bool>(), 8)) {
        let world = World::new(small_config(), 1).unwrap();
        let a = world.gen_activity(0, seed, 8).unwrap();
        let clean = world.render_video(&a, seed, 0.0, 4).unwrap();
        let chosen: Vec<usize> = (0..8).filter(|&i| mask[i]).collect();
        let bad = world.inject_errors(&clean, &a, &chosen, seed ^ 1).unwrap();
        for (c, &m) in mask.iter().enumerate() {
            for f in 0..4 {
                let flagged = bad.error_flags[c * 4 + f];
                prop_assert_eq!(flagged, m && f >= 2);
                if f < 2 || !m {
                    prop_assert_eq!(&bad.clips[c][f], &clean.clips[c][f]);
                } else {
                    prop_assert_ne!(&bad.clips[c][f], &clean.clips[c][f]);
                }
            }
        }
        prop_assert_eq!(&bad.step_labels, &clean.step_labels);
    }

    #[test]
    fn misordered_is_a_two_position_permutation(seed in any::<u64>(), i in 0usize..5) {
        let world = World::new(small_config(), 1).unwrap();
        let a = world.gen_activity(0, seed, 5).unwrap();
        let j = (i + 1) % 5;
        let m = make_misordered_cf(&a, i, j).unwrap();
        let diff = m.tokens.iter().zip(&a.summary_tokens).filter(|(x, y)| x != y).count();
        prop_assert_eq!(diff, 2);
        let k = make_missing_cf(&a, i).unwrap();
        prop_assert_eq!(k.tokens.len() + 1, a.summary_tokens.len());
        prop_assert_ne!(k.tokens, a.summary_tokens.clone());
    }
}
