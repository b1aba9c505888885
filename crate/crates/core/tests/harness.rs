use std::path::Path;

use egocast_core::harness::{
    run_ablate_visual, run_eval, run_generate, run_train_current, run_train_forecast, EvalOptions, Predictor,
    RunConfig,
};
use egocast_core::Error;
use tempfile::TempDir;

fn small(dir: &Path, iterations: usize) -> RunConfig {
    let mut cfg = RunConfig {
        output_dir: dir.to_path_buf(),
        train_data: Some(dir.join("train.jsonl")),
        test_data: Some(dir.join("test.jsonl")),
        seed: Some(11),
        ..RunConfig::default()
    };
    cfg.generator.sequences_per_archetype = 2;
    cfg.generator.duration_s = 4.0;
    cfg.estimator.window = 5;
    cfg.estimator.width = 8;
    cfg.estimator.layers = 1;
    cfg.estimator.heads = 2;
    cfg.estimator.head_hidden = 16;
    cfg.estimator.batch_size = 4;
    cfg.estimator.iterations = iterations;
    cfg.forecaster.window = 5;
    cfg.forecaster.horizon = 30;
    cfg.forecaster.width = 8;
    cfg.forecaster.layers = 1;
    cfg.forecaster.heads = 2;
    cfg.forecaster.head_hidden = 16;
    cfg.forecaster.batch_size = 4;
    cfg.forecaster.iterations = iterations;
    cfg.metrics.horizons = vec![0.5, 1.0];
    cfg.metrics.stride = 15;
    cfg.resolve().unwrap()
}

fn bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let whole = TempDir::new().unwrap();
    let split = TempDir::new().unwrap();
    for dir in [&whole, &split] {
        run_generate(&small(dir.path(), 0)).unwrap();
    }

    run_train_current(&small(whole.path(), 12), false).unwrap();
    run_train_current(&small(split.path(), 6), false).unwrap();
    let s = run_train_current(&small(split.path(), 12), true).unwrap();
    assert_eq!(s.start_step, 6);
    assert_eq!(s.trace.len(), 6);
    assert_eq!(bytes(&s.checkpoint), bytes(&small(whole.path(), 12).estimator_checkpoint_path()));

    run_train_forecast(&small(whole.path(), 12), false).unwrap();
    run_train_forecast(&small(split.path(), 6), false).unwrap();
    let s = run_train_forecast(&small(split.path(), 12), true).unwrap();
    assert_eq!(s.start_step, 6);
    assert_eq!(bytes(&s.checkpoint), bytes(&small(whole.path(), 12).forecaster_checkpoint_path()));
}

#[test]
fn training_is_deterministic_per_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        let cfg = small(dir.path(), 8);
        run_generate(&cfg).unwrap();
        run_train_current(&cfg, false).unwrap();
        run_train_forecast(&cfg, false).unwrap();
    }
    for name in ["checkpoints/estimator.ckpt", "checkpoints/forecaster.ckpt", "forecaster_loss.csv"] {
        assert_eq!(bytes(&a.path().join(name)), bytes(&b.path().join(name)), "{name}");
    }

    let c = TempDir::new().unwrap();
    let mut cfg = small(c.path(), 8);
    cfg.seed = Some(12);
    let cfg = cfg.resolve().unwrap();
    run_generate(&cfg).unwrap();
    run_train_current(&cfg, false).unwrap();
    assert_ne!(
        bytes(&a.path().join("checkpoints/estimator.ckpt")),
        bytes(&c.path().join("checkpoints/estimator.ckpt"))
    );
}

#[test]
fn echoing_ground_truth_scores_zero() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(tmp.path(), 0);
    run_generate(&cfg).unwrap();
    let opts = EvalOptions {
        predictor: Predictor::GroundTruth,
        oracle: true,
        ..EvalOptions::default()
    };
    let s = run_eval(&cfg, opts).unwrap();
    assert_eq!(s.report.mpjpe_cm, vec![0.0, 0.0]);
    assert_eq!(s.report.auc_cm, Some(0.0));
    assert!(s.report.per_joint_cm.iter().all(|v| *v == 0.0));
    assert_eq!(s.oracle.unwrap().mpjpe_cm, vec![0.0, 0.0]);
    let csv = std::fs::read_to_string(tmp.path().join("curves.csv")).unwrap();
    assert_eq!(csv, "horizon_s,mpjpe_cm\n0.5,0\n1,0\n");
}

#[test]
fn oracle_cancels_pure_translation_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(tmp.path(), 0);
    run_generate(&cfg).unwrap();
    let opts = EvalOptions {
        predictor: Predictor::GtShifted,
        oracle: true,
        ..EvalOptions::default()
    };
    let s = run_eval(&cfg, opts).unwrap();
    assert!(s.report.mpjpe_cm.iter().all(|v| *v > 1.0), "{:?}", s.report.mpjpe_cm);
    for v in s.oracle.unwrap().mpjpe_cm {
        assert!(v.abs() < 1e-9, "{v}");
    }
}

#[test]
fn model_eval_needs_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(tmp.path(), 0);
    run_generate(&cfg).unwrap();
    let err = run_eval(&cfg, EvalOptions::default()).unwrap_err();
    assert!(err.to_string().contains("checkpoint"), "{err}");
}

#[test]
fn missing_data_is_reported() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small(tmp.path(), 4);
    cfg.train_data = Some(tmp.path().join("absent.jsonl"));
    for err in [
        run_train_current(&cfg, false).unwrap_err(),
        run_train_forecast(&cfg, false).unwrap_err(),
    ] {
        assert!(matches!(err, Error::Config(_)), "{err:?}");
        assert!(err.to_string().contains("absent.jsonl"));
    }
    cfg.train_data = None;
    assert!(run_train_current(&cfg, false).is_err());
}

#[test]
fn resume_rejects_a_changed_architecture() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(tmp.path(), 4);
    run_generate(&cfg).unwrap();
    run_train_current(&cfg, false).unwrap();
    let mut wider = cfg.clone();
    wider.estimator.width = 16;
    wider.estimator.iterations = 8;
    assert!(matches!(run_train_current(&wider, true), Err(Error::Config(_))));
}

#[test]
fn visual_ablation_emits_both_arms_deterministically() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(tmp.path(), 6);
    run_generate(&cfg).unwrap();
    let first = run_ablate_visual(&cfg).unwrap();
    let arms: Vec<&str> = first.iter().map(|r| r.arm.as_str()).collect();
    assert_eq!(arms, ["informative", "null"]);
    assert_eq!(first, run_ablate_visual(&cfg).unwrap());
}
