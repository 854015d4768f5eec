mod common;

use common::checks::transitions;
use common::{random_labels, random_matrix, unit_rows};
use hsomrl::contrastive::{contrastive_loss, hardness_neg, hardness_pos, LossVariant};
use hsomrl::datagen::{bucket_by_return, generate, Trajectory};
use hsomrl::diffcore::Matrix;
use hsomrl::encoder::{EncoderDims, EncoderParams};
use hsomrl::envs::{EnvConfig, Family, Transition};
use hsomrl::eval::{alignment, uniformity};
use hsomrl::iql::expectile_loss;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn one_step(task_id: usize, r: f64) -> Trajectory {
    let t = Transition {
        s: vec![0.0],
        a: vec![0.0],
        s_next: vec![0.0],
        r,
    };
    Trajectory::new(task_id, 0, vec![t])
}

/// Random orthogonal matrix from Gram-Schmidt on a random square.
fn rotation(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_rows(&basis).unwrap()
}

fn family(i: usize) -> Family {
    Family::ALL[i % 3]
}

proptest! {
    #[test]
    fn buckets_partition_sorted_returns(returns in prop::collection::vec(-50.0f64..50.0, 1..80), k in 1usize..12) {
        let buffer: Vec<Trajectory> = returns.iter().enumerate().map(|(i, &r)| one_step(i, r)).collect();
        if buffer.len() < k {
            prop_assert!(bucket_by_return(&buffer, k).is_err());
            return Ok(());
        }
        let buckets = bucket_by_return(&buffer, k).unwrap();
        prop_assert_eq!(buckets.len(), k);
        let mut ids: Vec<usize> = buckets.iter().flatten().map(|t| t.task_id).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..buffer.len()).collect::<Vec<_>>());
        let sizes: Vec<usize> = buckets.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for pair in buckets.windows(2) {
            if let (Some(hi), Some(lo)) = (
                pair[0].iter().map(|t| t.return_).reduce(f64::max),
                pair[1].iter().map(|t| t.return_).reduce(f64::min),
            ) {
                prop_assert!(hi <= lo);
            }
        }
    }

    #[test]
    fn expectile_loss_is_convex(x in -10.0f64..10.0, y in -10.0f64..10.0, lambda in 0.0f64..1.0, tau in 0.01f64..0.99) {
        let mid = expectile_loss(lambda * x + (1.0 - lambda) * y, tau);
        let chord = lambda * expectile_loss(x, tau) + (1.0 - lambda) * expectile_loss(y, tau);
        prop_assert!(mid <= chord + 1e-12 * (1.0 + chord.abs()));
    }

    #[test]
    fn expectile_loss_is_continuous_at_zero(tau in 0.01f64..0.99, eps in 1e-9f64..1e-6) {
        prop_assert!(expectile_loss(eps, tau) < 1e-11);
        prop_assert!(expectile_loss(-eps, tau) < 1e-11);
    }

    #[test]
    fn hardness_weights_are_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..10);
        let anchor = unit_rows(1, 4, &mut rng);
        let set = random_matrix(n, 4, 1.0, &mut rng);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let rows: Vec<&[f64]> = (0..n).map(|i| set.row(i)).collect();
        let permuted: Vec<&[f64]> = order.iter().map(|&i| set.row(i)).collect();
        for f in [hardness_neg, hardness_pos] {
            let base = f(anchor.row(0), &rows).unwrap();
            let moved = f(anchor.row(0), &permuted).unwrap();
            for (k, &i) in order.iter().enumerate() {
                prop_assert!((moved[k] - base[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn losses_ignore_batch_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = random_labels(4, 4, &mut rng);
        let w = unit_rows(labels.len(), 5, &mut rng);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        let w2 = Matrix::from_rows(&order.iter().map(|&i| w.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        for variant in LossVariant::ALL {
            let a = contrastive_loss(&w, &labels, variant, 0.2).unwrap();
            let b = contrastive_loss(&w2, &l2, variant, 0.2).unwrap();
            prop_assert!((a - b).abs() < 1e-12, "{variant}: {a} vs {b}");
        }
    }

    #[test]
    fn uniformity_is_rotation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(2..8);
        let z = unit_rows(rng.gen_range(2..30), d, &mut rng);
        let rotated = z.matmul(&rotation(d, &mut rng)).unwrap();
        let (a, b) = (uniformity(&z, 2.0).unwrap(), uniformity(&rotated, 2.0).unwrap());
        prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn alignment_is_nonnegative_and_zero_only_on_identical_pairs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = unit_rows(rng.gen_range(1..20), 4, &mut rng);
        let b = unit_rows(a.rows(), 4, &mut rng);
        prop_assert!(alignment(&a, &b).unwrap() > 0.0);
        prop_assert_eq!(alignment(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn rollouts_respect_env_invariants(seed in any::<u64>(), fam in 0usize..3) {
        let env = EnvConfig::default();
        let family = family(fam);
        let (train, _) = env.sample_tasks(family, 2, 1, seed).unwrap();
        let task = &train[0];
        match family {
            Family::LineVel => prop_assert!((env.speed_range.0..=env.speed_range.1).contains(&task.params[0])),
            _ => prop_assert!((task.params.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12),
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actions: Vec<Vec<f64>> = (0..env.horizon)
            .map(|_| (0..family.action_dim()).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let run = || {
            let mut i = 0;
            env.rollout(task, seed, |_| {
                i += 1;
                actions[i - 1].clone()
            })
            .unwrap()
        };
        let traj = run();
        prop_assert_eq!(traj.len(), env.horizon);
        prop_assert_eq!(&traj, &run());
        for pair in traj.windows(2) {
            prop_assert_eq!(&pair[0].s_next, &pair[1].s);
        }
        for t in &traj {
            prop_assert_eq!(t.s.len(), family.obs_dim());
            prop_assert!(t.a.iter().all(|a| (-1.0..=1.0).contains(a)));
            prop_assert!(t.r.is_finite());
            if family != Family::DirWorld {
                prop_assert!(t.r <= 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn trajectory_encoding_is_order_free(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::new(EncoderDims::with_input(7).with_hidden_width(16), seed);
        let seg = transitions(rng.gen_range(1..40), 2, 2, &mut rng);
        let mut shuffled = seg.clone();
        shuffled.shuffle(&mut rng);
        let (z1, w1) = params.encode_trajectory(&seg).unwrap();
        let (z2, w2) = params.encode_trajectory(&shuffled).unwrap();
        prop_assert_eq!(z1, z2);
        prop_assert_eq!(w1, w2);
    }
}

#[test]
fn mean_return_falls_with_quality_level() {
    let env = EnvConfig::default();
    for family in Family::ALL {
        let (tasks, _) = env.sample_tasks(family, 2, 1, 8).unwrap();
        for task in &tasks {
            let buffer = generate(&env, task, 50, 10, 21).unwrap();
            let means: Vec<f64> = buffer
                .chunks(50)
                .map(|level| level.iter().map(|t| t.return_).sum::<f64>() / 50.0)
                .collect();
            for pair in means.windows(2) {
                assert!(pair[0] >= pair[1], "{family:?}: {means:?}");
            }
        }
    }
}

#[test]
fn dirworld_optimal_return_grows_with_horizon() {
    let mut last = f64::NEG_INFINITY;
    for horizon in [10, 20, 40, 60, 80] {
        let env = EnvConfig {
            horizon,
            ..EnvConfig::default()
        };
        let (tasks, _) = env.sample_tasks(Family::DirWorld, 1, 1, 3).unwrap();
        let traj = env.rollout(&tasks[0], 0, |s| env.optimal_action(&tasks[0], s)).unwrap();
        let ret = hsomrl::envs::episode_return(&traj);
        assert!(ret >= last, "horizon {horizon}: {ret} < {last}");
        last = ret;
    }
}
