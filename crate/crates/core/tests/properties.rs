use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use decoupled_rec::dataio::{
    build_samples, filter_min_count, parse_samples, split_leave_one_out, synth_generate, write_samples, Event,
    InteractionLog,
};
use decoupled_rec::loss::{coupled_loss, decompose, decoupled_loss, LossConfig, LossMode, SoftTarget};
use decoupled_rec::metrics::{ndcg_at_k, rank_in_scores, recall_at_k};
use decoupled_rec::model::{decode_checkpoint, encode_checkpoint, init_params, Matrix, ModelKind, PredictionDistribution};
use decoupled_rec::softlabel::{generate_lp, parse_targets, write_targets, LpParams};
use decoupled_rec::train::BatchSchedule;

fn log_strategy() -> impl Strategy<Value = InteractionLog> {
    (2usize..12, 2usize..15, prop::collection::vec((0usize..12, 0usize..15, 0i64..50), 1..200)).prop_map(
        |(users, items, raw)| {
            let events = raw
                .into_iter()
                .map(|(u, i, t)| Event {
                    user: u % users,
                    item: i % items,
                    timestamp: t,
                })
                .collect();
            InteractionLog {
                events,
                user_ids: (0..users as i64).map(|x| 100 + x).collect(),
                item_ids: (0..items as i64).map(|x| 7 * x).collect(),
            }
        },
    )
}

fn distribution(m: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize, f64)> {
    (
        prop::collection::vec(-6.0f64..6.0, m),
        prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1.0], m),
        0..m,
        0.0f64..=1.0,
    )
        .prop_map(|(z, mut w, y, l1)| {
            w[y] += 0.05;
            let s: f64 = w.iter().sum();
            (z, w.into_iter().map(|x| x / s).collect(), y, l1)
        })
}

fn soft(q: &[f64], y: usize) -> SoftTarget {
    SoftTarget::from_entries(y, q.iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(i, &x)| (i, x)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn filtered_counts_meet_the_threshold(log in log_strategy(), min in 1usize..4) {
        if let Ok(f) = filter_min_count(&log, min) {
            let mut users = BTreeMap::new();
            let mut items = BTreeMap::new();
            for e in &f.events {
                *users.entry(e.user).or_insert(0) += 1;
                *items.entry(e.item).or_insert(0) += 1;
            }
            prop_assert_eq!(users.len(), f.user_count());
            prop_assert_eq!(items.len(), f.item_count());
            prop_assert!(users.values().chain(items.values()).all(|&c| c >= min));
        }
    }

    #[test]
    fn split_partitions_the_samples(log in log_strategy(), max_len in 1usize..6) {
        let samples = build_samples(&log, max_len);
        let split = split_leave_one_out(&samples);
        let mut union: Vec<_> = split.train.iter().chain(&split.valid).chain(&split.test).cloned().collect();
        union.sort_by_key(|s| s.sample_id);
        let mut all = samples.clone();
        all.sort_by_key(|s| s.sample_id);
        prop_assert_eq!(union, all);

        let timelines = log.timelines();
        for s in &split.test {
            prop_assert_eq!(Some(&s.target), timelines[s.user].last());
        }
        for s in &samples {
            prop_assert!(!s.history.is_empty() && s.history.len() <= max_len);
            prop_assert!(s.history.iter().all(|&i| i < log.item_count()));
        }
    }

    #[test]
    fn sample_files_round_trip(log in log_strategy()) {
        let samples = build_samples(&log, 5);
        let mut buf = Vec::new();
        write_samples(&mut buf, &samples).unwrap();
        prop_assert_eq!(parse_samples(buf.as_slice()).unwrap(), samples);
    }

    #[test]
    fn synth_is_pure(users in 1usize..30, clusters in 1usize..5, noise in 0.0f64..=1.0, seed in any::<u64>()) {
        let a = synth_generate(users, clusters * 5, clusters, 6, noise, seed).unwrap();
        let b = synth_generate(users, clusters * 5, clusters, 6, noise, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn softmax_normalises_extreme_logits(z in prop::collection::vec(-1e4f64..1e4, 1..50)) {
        let p = PredictionDistribution::from_logits(&z);
        prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.probs.iter().all(|x| x.is_finite() && *x >= 0.0));
    }

    #[test]
    fn losses_are_nonnegative_and_shift_invariant(
        (z, q, y, l1) in (3usize..10).prop_flat_map(distribution),
        l2 in 0.0f64..=1.0,
        shift in -50.0f64..50.0,
    ) {
        let q = soft(&q, y);
        let shifted: Vec<f64> = z.iter().map(|x| x + shift).collect();
        for mode in [LossMode::Ce, LossMode::Ls, LossMode::Coupled, LossMode::Decoupled] {
            let cfg = LossConfig { mode, lambda1: l1, lambda2: l2, ..LossConfig::default() };
            let a = cfg.evaluate(&PredictionDistribution::from_logits(&z), &q).unwrap();
            let b = cfg.evaluate(&PredictionDistribution::from_logits(&shifted), &q).unwrap();
            prop_assert!(a.loss >= -1e-12, "{:?} loss {}", mode, a.loss);
            prop_assert!((a.loss - b.loss).abs() <= 1e-9 * a.loss.abs().max(1.0));
            prop_assert!(a.grad_logits.iter().sum::<f64>().abs() <= 1e-12);
            for (ga, gb) in a.grad_logits.iter().zip(&b.grad_logits) {
                prop_assert!((ga - gb).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn kl_parts_vanish_when_prediction_matches(
        (_, q, y, _) in (3usize..10).prop_flat_map(distribution),
    ) {
        // a prediction equal to the full-support target makes KL(q‖p) zero
        let m = q.len();
        let smoothed: Vec<f64> = q.iter().map(|x| 0.9 * x + 0.1 / m as f64).collect();
        let z: Vec<f64> = smoothed.iter().map(|x| x.ln()).collect();
        let p = PredictionDistribution::from_logits(&z);
        let t = soft(&smoothed, y);
        prop_assert!(coupled_loss(&p, &t, y, 1.0, 1e-12).unwrap().loss.abs() < 1e-12);
        let d = decompose(&p, &t, y, 1.0, 1e-12).unwrap();
        prop_assert!(d.kl_b.abs() < 1e-12 && d.kl_hat.abs() < 1e-12);
    }

    #[test]
    fn decoupled_is_linear_in_its_parts(
        (z, q, y, l1) in (3usize..10).prop_flat_map(distribution),
        l2 in 0.0f64..=1.0,
    ) {
        let p = PredictionDistribution::from_logits(&z);
        let t = soft(&q, y);
        let d = decompose(&p, &t, y, l1, 1e-12).unwrap();
        let value = decoupled_loss(&p, &t, y, l1, l2, 1e-12).unwrap().loss;
        prop_assert!((value - (l2 * d.kl_b + (1.0 - l2) * d.kl_hat)).abs() <= 1e-12);
    }

    #[test]
    fn ranking_metric_monotonicity(rank in 1usize..200, k in 1usize..100) {
        prop_assert!(recall_at_k(rank, k) <= recall_at_k(rank, k + 1));
        prop_assert!(ndcg_at_k(rank, k) <= ndcg_at_k(rank, k + 1));
        prop_assert!(ndcg_at_k(rank, k) <= recall_at_k(rank, k));
    }

    #[test]
    fn rank_invariant_under_monotone_transform(scores in prop::collection::vec(-5.0f64..5.0, 2..60), t in 0usize..60) {
        let target = t % scores.len();
        let transformed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
        let r = rank_in_scores(&scores, target, &[]);
        prop_assert_eq!(r, rank_in_scores(&transformed, target, &[]));
        prop_assert!(r >= 1 && r <= scores.len());
    }

    #[test]
    fn batches_cover_each_sample_once_per_epoch(n in 1usize..300, bs in 1usize..64, seed in any::<u64>()) {
        let mut schedule = BatchSchedule::new(n, bs, seed);
        for _ in 0..3 {
            let mut seen: Vec<usize> = schedule.next_epoch().flat_map(|b| b.to_vec()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn lp_targets_satisfy_invariants(
        n in 2usize..60,
        k in 1usize..6,
        tau in prop_oneof![Just(0.25), Just(0.5), Just(1.0), Just(2.0)],
        iterations in 0usize..5,
        seed in any::<u64>(),
    ) {
        let m = 9;
        let data: Vec<f64> = (0..n * 3).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 250.0).collect();
        let samples: Vec<_> = (0..n)
            .map(|i| decoupled_rec::dataio::Sample { sample_id: 1000 + i, user: i, history: vec![0], target: (i * 7 + seed as usize) % m })
            .collect();
        let params = LpParams { k: k.min(n), tau, iterations, ..LpParams::default() };
        let set = generate_lp(&Matrix::from_vec(n, 3, data), &samples, &params, m, seed).unwrap();
        prop_assert_eq!(set.len(), n);
        let all_targets: BTreeSet<usize> = samples.iter().map(|s| s.target).collect();
        for s in &samples {
            let q = set.get(s.sample_id).unwrap();
            let mut sum = 0.0;
            q.for_each_nonzero(|i, p| { sum += p; assert!(all_targets.contains(&i)); });
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(q.q_y() >= 0.5 - 1e-12);
            prop_assert_eq!(q.target(), s.target);
        }
        let mut buf = Vec::new();
        write_targets(&mut buf, &set).unwrap();
        prop_assert_eq!(parse_targets(buf.as_slice()).unwrap(), set);
    }

    #[test]
    fn checkpoints_round_trip(m in 1usize..20, users in 1usize..5, d in 1usize..6, seed in any::<u64>(), dot in any::<bool>()) {
        let kind = if dot { ModelKind::DotFactorization } else { ModelKind::MeanPoolEncoder };
        let params = init_params(kind, m, users, d, seed);
        prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&params)).unwrap(), params);
    }
}
