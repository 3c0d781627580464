//! Two-stage training loop behaviour on toy models.

use defmatch::geometry::SceneParams;
use defmatch::model::{ModelConfig, Weights};
use defmatch::train::{train_descriptor_branch, train_keypoint_branch, training_pairs, TrainConfig};
use defmatch::Error;

fn descriptor_bytes(w: &Weights) -> Vec<u8> {
    w.descriptor_params()
        .iter()
        .flat_map(|(_, t)| t.to_dten_bytes())
        .collect()
}

#[test]
fn zero_step_size_keeps_descriptor_loss_constant() {
    // Fewer ground-truth rows than matches per step, so every step sees them all.
    let pairs = training_pairs(3, 1, &SceneParams::default(), 32).unwrap();
    let mut w = Weights::init(ModelConfig::toy(), 3).unwrap();
    let before = w.params.clone();
    let cfg = TrainConfig {
        steps: 6,
        lr: 0.0,
        seed: 3,
        ..TrainConfig::default()
    };
    let curve = train_descriptor_branch(&mut w, &pairs, &cfg, 0).unwrap();
    let t = curve.totals();
    assert_eq!(t.len(), 6);
    for v in &t {
        assert!((v - t[0]).abs() <= 1e-12 * t[0].abs(), "{t:?}");
    }
    assert_eq!(w.params, before);
}

#[test]
fn keypoint_stage_freezes_descriptor_and_reduces_reprojection() {
    let pairs = training_pairs(0, 8, &SceneParams::default(), 1024).unwrap();
    let mut w = Weights::init(ModelConfig::toy(), 0).unwrap();
    let frozen = descriptor_bytes(&w);
    let cfg = TrainConfig {
        seed: 0,
        ..TrainConfig::keypoint_stage()
    };
    let curve = train_keypoint_branch(&mut w, &pairs, &cfg, 0).unwrap();
    assert_eq!(descriptor_bytes(&w), frozen, "descriptor weights changed");
    let reproj = curve.column("loss_reprojection").unwrap();
    let (first, last) = (reproj[0], reproj[reproj.len() - 1]);
    assert!(last <= 0.7 * first, "reprojection {first} -> {last}");
}

#[test]
fn unmatched_random_positions_stay_finite() {
    // A tiny matching radius leaves most sampled positions without a partner.
    let pairs = training_pairs(5, 2, &SceneParams::default(), 256).unwrap();
    let mut w = Weights::init(ModelConfig::toy(), 5).unwrap();
    let mut cfg = TrainConfig {
        steps: 4,
        seed: 5,
        ..TrainConfig::keypoint_stage()
    };
    cfg.loss.match_radius = 0.05;
    let curve = train_keypoint_branch(&mut w, &pairs, &cfg, 0).unwrap();
    assert!(curve.rows.iter().all(|(_, v)| v.iter().all(|x| x.is_finite())));
    assert!(w.params.iter().all(|(_, t)| t.all_finite()));
}

#[test]
fn training_is_deterministic_and_resumable() {
    let pairs = training_pairs(9, 2, &SceneParams::default(), 256).unwrap();
    let cfg = TrainConfig {
        steps: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut w = Weights::init(ModelConfig::toy(), 9).unwrap();
        let c = train_descriptor_branch(&mut w, &pairs, &cfg, 0).unwrap();
        (w, c)
    };
    let (w1, c1) = run();
    let (w2, c2) = run();
    assert_eq!(c1.to_csv(), c2.to_csv());
    assert_eq!(w1.params, w2.params);

    let mut w3 = Weights::init(ModelConfig::toy(), 9).unwrap();
    let half = TrainConfig {
        steps: 2,
        ..cfg.clone()
    };
    let mut c3 = train_descriptor_branch(&mut w3, &pairs, &half, 0).unwrap();
    c3.rows
        .extend(train_descriptor_branch(&mut w3, &pairs, &half, 2).unwrap().rows);
    assert_eq!(c3.to_csv(), c1.to_csv());
    assert_eq!(w3.params, w1.params);
}

#[test]
fn divergence_is_a_numeric_error() {
    let pairs = training_pairs(1, 1, &SceneParams::default(), 64).unwrap();
    let mut w = Weights::init(ModelConfig::toy(), 1).unwrap();
    let cfg = TrainConfig {
        steps: 20,
        lr: 1e300,
        clip_norm: 1e300,
        seed: 1,
        ..TrainConfig::default()
    };
    let err = train_descriptor_branch(&mut w, &pairs, &cfg, 0).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    if let Error::Diverged { step, .. } = err {
        assert!(step < 20);
    }
}
