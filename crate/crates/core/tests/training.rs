mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spiralscreen::backbone::{random_graph, BackboneId, RandomGraphSpec};
use spiralscreen::training::{
    build_classifier, evaluate, evaluate_features, train, Classifier, FeatureSet, HeadOptimizer, TrainingConfig,
    TrainingHistory,
};
use spiralscreen::report::format_metric;
use spiralscreen::{ClassLabel, DrawingType, Error, ExecMode};

use common::*;

/// Two Gaussian blobs in feature space, `sep` apart along every axis.
fn blobs(n: usize, dim: usize, sep: f32, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = FeatureSet::default();
    for i in 0..n {
        let label = ClassLabel::ALL[i % 2];
        let shift = if label == ClassLabel::Parkinson { sep } else { 0.0 };
        set.features
            .push((0..dim).map(|_| rng.gen_range(-1.0f32..1.0) + shift).collect());
        set.labels.push(label);
        set.ids.push(format!("blob/{i}"));
    }
    set
}

fn model() -> Classifier {
    Classifier::new(standin(BackboneId::MobilenetV2, 96, 3), 42)
}

fn config(epochs: usize, early_stop: bool) -> TrainingConfig {
    TrainingConfig {
        epochs,
        input_size: 96,
        early_stop_enabled: early_stop,
        ..TrainingConfig::new(BackboneId::MobilenetV2, DrawingType::Spiral)
    }
}

#[test]
fn build_classifier_contract() {
    let dir = tempfile::tempdir().unwrap();
    let err = build_classifier(BackboneId::MobilenetV2, dir.path(), 224, 42).unwrap_err();
    assert!(matches!(err, Error::Environment { .. }), "{err}");

    for id in BackboneId::ALL {
        let bytes = random_graph(&RandomGraphSpec::variant_for(id, 9));
        std::fs::write(dir.path().join(id.graph_file_name()), &bytes).unwrap();
    }
    let a = build_classifier(BackboneId::MobilenetV2, dir.path(), 224, 42).unwrap();
    let b = build_classifier(BackboneId::MobilenetV2, dir.path(), 224, 42).unwrap();
    assert_eq!(a.output_dim(), 2);
    assert_eq!(a.trainable_param_count(), 2 * a.backbone().feature_dim() + 2);
    assert_eq!(a.head().digest(), b.head().digest());
    let fresh = spiralscreen::digest::sha256_hex(&std::fs::read(dir.path().join("mobilenet_v2.onnx")).unwrap());
    assert_eq!(a.backbone().digest(), fresh);

    let err = build_classifier(BackboneId::NasnetMobile, dir.path(), 96, 42).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn epoch_counts() {
    let m = model();
    let dim = m.backbone().feature_dim();
    let (tr, va) = (blobs(64, dim, 0.3, 1), blobs(32, dim, 0.3, 2));
    let (h, _) = train(&m, &tr, &va, &config(1, true)).unwrap();
    assert_eq!(h.records.len(), 1);
    let (h, _) = train(&m, &tr, &va, &config(100, false)).unwrap();
    assert_eq!(h.records.len(), 100);
    assert!(!h.stopped_early);
    assert!(h.records.iter().enumerate().all(|(i, r)| r.epoch == i + 1));
}

#[test]
fn plateau_stops_early_and_replays() {
    let m = model();
    let dim = m.backbone().feature_dim();
    let (tr, va) = (blobs(200, dim, 2.0, 3), blobs(60, dim, 2.0, 4));
    let (h, trained) = train(&m, &tr, &va, &config(100, true)).unwrap();
    assert!(h.stopped_early);
    assert!(h.records.len() < 100);
    let vals = h.val_accuracies();
    assert_eq!(replay_stop(&vals, 3), Some(h.records.len()));
    assert_eq!(counter_stop(&vals, 3), Some(h.records.len()));

    // best epoch: earliest maximum, and its head is the one returned
    let best = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(h.best_epoch, vals.iter().position(|&v| v == best).unwrap() + 1);
    let (acc, loss) = evaluate_features(trained.head(), &va).unwrap();
    let rec = h.best_record().unwrap();
    assert_eq!((acc, loss), (rec.val_accuracy, rec.val_loss));
}

#[test]
fn backbone_stays_frozen() {
    let m = model();
    let before = m.backbone().current_digest();
    let dim = m.backbone().feature_dim();
    let (_, trained) = train(&m, &blobs(64, dim, 0.5, 5), &blobs(32, dim, 0.5, 6), &config(5, false)).unwrap();
    assert_eq!(trained.backbone().current_digest(), before);
    assert_eq!(trained.backbone().digest(), before);
    assert_ne!(trained.head().digest(), m.head().digest());
}

#[test]
fn head_loss_decreases_over_first_steps() {
    let m = model();
    let set = blobs(8, m.backbone().feature_dim(), 0.5, 7);
    let batch: Vec<(Vec<f64>, ClassLabel)> = set
        .features
        .iter()
        .map(|f| f.iter().map(|&v| v as f64).collect())
        .zip(set.labels.iter().copied())
        .collect();
    let mut opt = HeadOptimizer::new(m.head(), 1e-3);
    let losses: Vec<f64> = (0..6).map(|_| opt.step(&batch).0 / 8.0).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss did not decrease: {losses:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let m = model();
    let dim = m.backbone().feature_dim();
    let (tr, va) = (blobs(50, dim, 0.4, 8), blobs(20, dim, 0.4, 9));
    let (h1, m1) = train(&m, &tr, &va, &config(8, false)).unwrap();
    let (h2, m2) = train(&m, &tr, &va, &config(8, false)).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(m1.head(), m2.head());
}

#[test]
fn divergence_keeps_history() {
    let m = model();
    let dim = m.backbone().feature_dim();
    let mut tr = blobs(16, dim, 0.4, 10);
    tr.features[3][0] = f32::INFINITY;
    let err = train(&m, &tr, &blobs(8, dim, 0.4, 11), &config(10, false)).unwrap_err();
    match err {
        Error::Diverged { epoch, history } => {
            assert_eq!(epoch, 1);
            assert_eq!(history.records.len(), 1);
        }
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn invalid_configs() {
    let m = model();
    let dim = m.backbone().feature_dim();
    let set = blobs(8, dim, 0.4, 12);
    for cfg in [
        TrainingConfig { epochs: 0, ..config(1, true) },
        TrainingConfig { patience: 0, ..config(1, true) },
        TrainingConfig { split_ratio: 1.0, ..config(1, true) },
        TrainingConfig { input_size: 128, ..config(1, true) },
    ] {
        assert!(matches!(train(&m, &set, &set, &cfg), Err(Error::Config(_))));
    }
    assert!(matches!(train(&m, &FeatureSet::default(), &set, &config(1, true)), Err(Error::Input(_))));
}

#[test]
fn predictions_are_distributions() {
    let m = model();
    for img in synth_set(DrawingType::Spiral, 4, 4, 128, 1) {
        let p = m.predict_proba(&img.pixels).unwrap();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(matches!(evaluate(&m, &[], ExecMode::Sequential), Err(Error::Input(_))));
    let (acc, loss) = evaluate(&m, &synth_set(DrawingType::Wave, 3, 3, 96, 2), ExecMode::Parallel).unwrap();
    assert!((0.0..=1.0).contains(&acc) && loss.is_finite() && loss >= 0.0);
}

#[test]
fn history_csv_round_trip() {
    let m = model();
    let dim = m.backbone().feature_dim();
    let (h, _) = train(&m, &blobs(40, dim, 0.3, 13), &blobs(20, dim, 0.3, 14), &config(12, false)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    h.write_csv(&path).unwrap();
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("epoch,train_acc,train_loss,val_acc,val_loss\n"));
    let back = TrainingHistory::read_csv(&path).unwrap();
    assert_eq!(back.len(), h.records.len());
    for (a, b) in h.records.iter().zip(&back) {
        assert_eq!(a.epoch, b.epoch);
        for (x, y) in [
            (a.train_accuracy, b.train_accuracy),
            (a.train_loss, b.train_loss),
            (a.val_accuracy, b.val_accuracy),
            (a.val_loss, b.val_loss),
        ] {
            assert_eq!(format_metric(x), format_metric(y));
            assert!((x - y).abs() <= 5e-6 * x.abs().max(1e-300));
        }
    }
}
