use std::time::Instant;

use decoupled_rec::dataio::Sample;
use decoupled_rec::loss::{redline_lambda2, LossConfig, LossMode};
use decoupled_rec::model::{backward, embed_samples, forward_cached, init_params, score_and_softmax, ModelKind};
use decoupled_rec::softlabel::{generate_lp, GeneratorKind, LpParams};
use decoupled_rec::train::{
    batch_gradients, build_soft_targets, grid_search, load_dataset, pretrain, run_experiment, run_experiment_with,
    train_final, ExperimentConfig, RunReport, StageCache,
};
use decoupled_rec::verify::random_target;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synth.users = 60;
    cfg.data.synth.items = 40;
    cfg.data.synth.clusters = 4;
    cfg.data.synth.events_per_user = 10;
    cfg.data.synth.noise = 0.1;
    cfg.model.dim = 8;
    cfg.optim.pretrain_epochs = 3;
    cfg.optim.train_epochs = 3;
    cfg.optim.batch_size = 64;
    cfg.optim.lr = 0.01;
    cfg.generator.k = 4;
    cfg
}

fn lp(mut cfg: ExperimentConfig, mode: LossMode) -> ExperimentConfig {
    cfg.loss.mode = mode;
    cfg.generator.kind = GeneratorKind::Lp;
    cfg
}

fn test_metrics(r: &RunReport) -> String {
    r.test.csv_line()
}

#[test]
fn identical_config_and_seed_reproduce_metrics() {
    let cfg = lp(small(), LossMode::Decoupled);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(test_metrics(&a), test_metrics(&b));
    assert_eq!(a.epochs, b.epochs);
    let mut other = cfg.clone();
    other.seed = 1;
    let c = run_experiment(&other).unwrap();
    assert_ne!(a.epochs, c.epochs);
}

#[test]
fn pretrain_is_deterministic() {
    let cfg = small();
    let ds = load_dataset(&cfg.data).unwrap();
    assert_eq!(pretrain(&cfg, &ds).unwrap().params, pretrain(&cfg, &ds).unwrap().params);
}

#[test]
fn noise_free_planted_clusters_are_learnable() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synth.users = 200;
    cfg.data.synth.items = 40;
    cfg.data.synth.clusters = 8;
    cfg.data.synth.noise = 0.0;
    cfg.model.dim = 16;
    cfg.optim.lr = 0.01;
    cfg.optim.pretrain_epochs = 20;
    let ds = load_dataset(&cfg.data).unwrap();
    let fitted = pretrain(&cfg, &ds).unwrap();
    let best = fitted.best_valid.unwrap().ndcg(10);
    assert!(best >= 0.5, "valid NDCG@10 {best}");
}

#[test]
fn report_bookkeeping_and_round_trip() {
    let mut cfg = lp(small(), LossMode::Coupled);
    cfg.optim.train_epochs = 4;
    let report = run_experiment(&cfg).unwrap();
    assert!(!report.epochs.is_empty() && report.epochs.len() <= 4);
    for (i, e) in report.epochs.iter().enumerate() {
        assert_eq!(e.epoch, i + 1);
        assert!(e.train_loss.is_finite());
    }
    for a in report.test.at.iter().chain(report.valid.as_ref().unwrap().at.iter()) {
        assert!((0.0..=1.0).contains(&a.recall) && (0.0..=1.0).contains(&a.ndcg));
    }
    assert_eq!(RunReport::from_json(&report.to_json()).unwrap(), report);
    assert!(report.summary_line().starts_with("coupled+lp,0,"));
}

#[test]
fn early_stopping_keeps_the_best_checkpoint() {
    let mut cfg = small();
    cfg.optim.train_epochs = 30;
    cfg.optim.patience = 2;
    cfg.optim.lr = 0.05;
    let report = run_experiment(&cfg).unwrap();
    let best_seen = report
        .epochs
        .iter()
        .map(|e| e.valid.ndcg(10))
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.best_valid_ndcg10(), best_seen);
    let best_epoch = report.best_epoch.unwrap();
    assert!(report.epochs.len() <= best_epoch + 2);
}

#[test]
fn ce_final_training_replays_pretraining() {
    let cfg = small();
    let ds = load_dataset(&cfg.data).unwrap();
    let pre = pretrain(&cfg, &ds).unwrap();
    let targets = build_soft_targets(&cfg, None, &ds).unwrap();
    let fin = train_final(&cfg, &ds, &targets, None).unwrap();
    assert_eq!(pre.history, fin.history);
    assert_eq!(pre.params, fin.params);
}

#[test]
fn coupled_at_zero_lambda_replays_ce() {
    let mut cfg = lp(small(), LossMode::Coupled);
    cfg.loss.lambda1 = 0.0;
    let ds = load_dataset(&cfg.data).unwrap();
    let pre = pretrain(&cfg, &ds).unwrap();
    let targets = build_soft_targets(&cfg, Some(&pre.params), &ds).unwrap();
    let fin = train_final(&cfg, &ds, &targets, None).unwrap();
    assert_eq!(fin.history[0].valid, pre.history[0].valid);
    assert!((fin.history[0].train_loss - pre.history[0].train_loss).abs() < 1e-12);
}

#[test]
fn live_endpoint_checks_pass() {
    for (mode, l1, l2) in [(LossMode::Decoupled, 0.4, 1.0), (LossMode::Coupled, 0.0, 0.5), (LossMode::Ce, 0.5, 0.5)] {
        let mut cfg = if mode == LossMode::Ce { small() } else { lp(small(), mode) };
        cfg.loss.lambda1 = l1;
        cfg.loss.lambda2 = l2;
        cfg.optim.debug_checks = true;
        run_experiment(&cfg).unwrap();
    }
}

#[test]
fn batch_gradient_is_the_mean_of_sample_gradients() {
    let cfg = lp(small(), LossMode::Decoupled);
    let ds = load_dataset(&cfg.data).unwrap();
    let pre = pretrain(&cfg, &ds).unwrap();
    let targets = build_soft_targets(&cfg, Some(&pre.params), &ds).unwrap();
    let params = &pre.params;
    let batch: Vec<&Sample> = ds.splits.train.iter().take(5).collect();
    let (loss, grads) = batch_gradients(params, &batch, Some(&targets), &cfg.loss, false).unwrap();

    let mut expected_out = vec![0.0; params.item_out.as_slice().len()];
    let mut expected_loss = 0.0;
    for s in &batch {
        let c = forward_cached(params, s).unwrap();
        let out = cfg
            .loss
            .evaluate(&score_and_softmax(params, &c.repr), targets.get(s.sample_id).unwrap())
            .unwrap();
        expected_loss += out.loss / 5.0;
        let g = backward(params, s, &out.grad_logits).unwrap();
        for (e, x) in expected_out.iter_mut().zip(g.item_out.as_slice()) {
            *e += x / 5.0;
        }
    }
    assert!((loss - expected_loss).abs() < 1e-12);
    let diff = grads
        .item_out
        .as_slice()
        .iter()
        .zip(&expected_out)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12);
}

#[test]
fn redline_parameter_steps_are_collinear() {
    let cfg = small();
    let ds = load_dataset(&cfg.data).unwrap();
    let params = init_params(ModelKind::MeanPoolEncoder, ds.item_count(), ds.user_count(), 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in ds.splits.train.iter().take(20) {
        let q = random_target(&mut rng, ds.item_count(), s.target);
        let l1 = rng.random_range(0.1..0.9);
        let l2 = redline_lambda2(l1, q.q_y());
        let c = forward_cached(&params, s).unwrap();
        let p = score_and_softmax(&params, &c.repr);
        let coupled = LossConfig { mode: LossMode::Coupled, lambda1: l1, ..LossConfig::default() };
        let decoupled = LossConfig { mode: LossMode::Decoupled, lambda1: l1, lambda2: l2, ..LossConfig::default() };
        let gc = backward(&params, s, &coupled.evaluate(&p, &q).unwrap().grad_logits).unwrap();
        let gd = backward(&params, s, &decoupled.evaluate(&p, &q).unwrap().grad_logits).unwrap();
        let a = gc.item_out.as_slice();
        let b = gd.item_out.as_slice();
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 1.0 - 1e-10);
        assert!((nb / na - l2).abs() < 1e-8);
        for (row, g) in &gc.item_in {
            let other = &gd.item_in[row];
            for (x, y) in g.iter().zip(other) {
                assert!((l2 * x - y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn gradients_touch_only_reached_rows() {
    let cfg = small();
    let ds = load_dataset(&cfg.data).unwrap();
    let m = ds.item_count();
    let s = &ds.splits.train[3];
    let grad_logits = vec![0.01; m];
    let mean_pool = init_params(ModelKind::MeanPoolEncoder, m, ds.user_count(), 4, 0);
    let g = backward(&mean_pool, s, &grad_logits).unwrap();
    let mut hist = s.history.clone();
    hist.sort_unstable();
    hist.dedup();
    assert_eq!(g.item_in.keys().copied().collect::<Vec<_>>(), hist);
    assert!(g.user_emb.is_empty());

    let dot = init_params(ModelKind::DotFactorization, m, ds.user_count(), 4, 0);
    let g = backward(&dot, s, &grad_logits).unwrap();
    assert!(g.item_in.is_empty());
    assert_eq!(g.user_emb.keys().copied().collect::<Vec<_>>(), vec![s.user]);
}

#[test]
fn lp_mass_stays_in_the_planted_block() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synth.users = 200;
    cfg.data.synth.items = 80;
    cfg.data.synth.clusters = 4;
    cfg.data.synth.noise = 0.0;
    cfg.model.dim = 16;
    cfg.optim.lr = 0.01;
    cfg.optim.pretrain_epochs = 10;
    let ds = load_dataset(&cfg.data).unwrap();
    let pre = pretrain(&cfg, &ds).unwrap();
    let emb = embed_samples(&pre.params, &ds.splits.train).unwrap();
    let params = LpParams {
        k: 4,
        ..LpParams::default()
    };
    let set = generate_lp(&emb, &ds.splits.train, &params, ds.item_count(), 0).unwrap();
    let block = 80 / 4;
    let mut worst: f64 = 1.0;
    for s in &ds.splits.train {
        let cluster = (ds.user_ids[s.user] % 4) as usize;
        let q = set.get(s.sample_id).unwrap();
        let mut in_block = 0.0;
        q.for_each_nonzero(|i, p| {
            if ds.item_ids[i] as usize / block == cluster {
                in_block += p;
            }
        });
        worst = worst.min(in_block);
    }
    assert!(worst >= 0.9, "worst in-block mass {worst}");
}

#[test]
fn ls_targets_have_expected_confidence() {
    let mut cfg = small();
    cfg.generator.kind = GeneratorKind::Ls;
    cfg.generator.ls_epsilon = 0.1;
    let ds = load_dataset(&cfg.data).unwrap();
    let m = ds.item_count() as f64;
    let set = build_soft_targets(&cfg, None, &ds).unwrap();
    assert_eq!(set.len(), ds.splits.train.len());
    for q in set.targets.values() {
        assert!((q.q_y() - (1.0 - 0.1 * (m - 1.0) / m)).abs() < 1e-12);
    }
    cfg.generator.kind = GeneratorKind::None;
    assert!(build_soft_targets(&cfg, None, &ds).unwrap().targets.values().all(|q| q.is_one_hot()));
}

#[test]
fn synthetic_pipeline_fits_the_time_budget() {
    let mut cfg = lp(ExperimentConfig::default(), LossMode::Decoupled);
    cfg.model.dim = 16;
    cfg.optim.lr = 0.01;
    cfg.generator.k = 16;
    let start = Instant::now();
    run_experiment(&cfg).unwrap();
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn grid_search_cells() {
    let base = lp(small(), LossMode::Decoupled);
    let cache = StageCache::new();

    let empty = grid_search(&base, &[], 1, &cache);
    assert_eq!(empty.len(), 1);
    let single = run_experiment_with(&base, &cache).unwrap().1;
    assert_eq!(empty[0].result.as_ref().unwrap().test, single.test);

    let ablation = grid_search(&base, &[("loss.lambda2".into(), vec!["0".into(), "1".into()])], 2, &cache);
    assert_eq!(ablation.len(), 2);
    assert!(ablation.iter().all(|c| c.result.is_ok()));

    let poisoned = grid_search(
        &base,
        &[("loss.lambda1".into(), vec!["0.1".into(), "1.5".into(), "0.9".into()])],
        1,
        &cache,
    );
    assert_eq!(poisoned.iter().filter(|c| c.result.is_ok()).count(), 2);
    let failed = poisoned.last().unwrap();
    assert_eq!(failed.assignments[0].1, "1.5");
    assert!(failed.result.is_err());
    assert!(poisoned[0].valid_ndcg10() >= poisoned[1].valid_ndcg10());
}
