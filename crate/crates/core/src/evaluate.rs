//! Relative-pose and homography evaluation over synthetic scenes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    gt_correspondences, homography_corner_error, homography_mha, pose_auc, ransac_fundamental, ransac_homography,
    recover_pose, synth_scene, DepthProfile, Homography, MetricReport, PoseError, ScenePair, SceneParams,
    MHA_THRESHOLDS, POSE_THRESHOLDS,
};
use crate::matcher::{
    extract, match_descriptors, match_features_sparse, semi_dense_from_sparse, MatchConfig, MatchKind, MatchSet,
};
use crate::model::Weights;
use crate::numeric::Tensor;

/// Where descriptors come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorMode {
    /// Both network branches.
    Trained,
    /// Ground-truth keypoints described by a code of their image-1 position.
    Oracle,
    /// Ground-truth keypoints with independent random descriptors.
    Random,
}

impl std::str::FromStr for DescriptorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trained" => Ok(Self::Trained),
            "oracle" => Ok(Self::Oracle),
            "random" => Ok(Self::Random),
            _ => Err(Error::invalid(format!("unknown descriptor mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub scenes: usize,
    /// Non-planar by default: points on a single plane leave `F` undetermined,
    /// so plane scenes only yield homography accuracy.
    /// Scene `i` uses seed `seed + i`.
    pub seed: u64,
    pub scene: SceneParams,
    pub mode: DescriptorMode,
    pub semi_dense: bool,
    pub matching: MatchConfig,
    /// Keypoints per image in oracle and random modes.
    pub oracle_keypoints: usize,
    pub ransac_iters: usize,
    pub ransac_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scenes: 20,
            seed: 0,
            scene: SceneParams {
                profile: DepthProfile::Cloud,
                ..SceneParams::default()
            },
            mode: DescriptorMode::Trained,
            semi_dense: false,
            matching: MatchConfig::default(),
            oracle_keypoints: 256,
            ransac_iters: 1000,
            ransac_thresh: 1.0,
        }
    }
}

/// Result for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneOutcome {
    pub seed: u64,
    pub matches: usize,
    /// `None` for zero-baseline scenes, whose pose is not evaluated.
    pub pose: Option<PoseError>,
    /// Mean corner error for planar scenes; `Some(None)` marks a failure.
    pub corner_error: Option<Option<f64>>,
}

/// Sinusoidal code of a position normalised by the image extents, unit norm.
pub fn position_code(p: (f64, f64), width: usize, height: usize, channels: usize) -> Vec<f64> {
    let (u, v) = (p.0 / width as f64, p.1 / height as f64);
    let bands = channels / 4;
    let mut code = Vec::with_capacity(channels);
    for b in 0..bands {
        let f = std::f64::consts::PI * (1u64 << b.min(20)) as f64;
        code.extend([(f * u).sin(), (f * u).cos(), (f * v).sin(), (f * v).cos()]);
    }
    code.resize(channels, 0.0);
    let n = code.iter().map(|c| c * c).sum::<f64>().sqrt();
    code.iter().map(|c| c / n).collect()
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let c = rows.first().map_or(0, Vec::len);
    Tensor::new(&[rows.len(), c], rows.concat())
}

/// Matches from ground-truth keypoints with oracle or random descriptors.
fn reference_matches(scene: &ScenePair, cfg: &EvalConfig, seed: u64) -> Result<MatchSet> {
    let gt = gt_correspondences(scene, cfg.oracle_keypoints, seed);
    let p1: Vec<(f64, f64)> = gt.rows.iter().map(|r| (r[0], r[1])).collect();
    let p2: Vec<(f64, f64)> = gt.rows.iter().rev().map(|r| (r[2], r[3])).collect();
    let channels = 32;
    let (d1, d2) = match cfg.mode {
        DescriptorMode::Oracle => {
            let code = |p| position_code(p, scene.width(), scene.height(), channels);
            let d1: Vec<_> = p1.iter().map(|&p| code(p)).collect();
            let d2: Vec<_> = gt.rows.iter().rev().map(|r| code((r[0], r[1]))).collect();
            (rows_to_tensor(&d1)?, rows_to_tensor(&d2)?)
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let unit = |t: Tensor| -> Result<Tensor> {
                let rows: Vec<Vec<f64>> = t
                    .data()
                    .chunks_exact(channels)
                    .map(|r| {
                        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                        r.iter().map(|v| v / n).collect()
                    })
                    .collect();
                rows_to_tensor(&rows)
            };
            let d1 = unit(Tensor::randn(&[p1.len(), channels], 1.0, &mut rng))?;
            let d2 = unit(Tensor::randn(&[p2.len(), channels], 1.0, &mut rng))?;
            (d1, d2)
        }
    };
    let m = &cfg.matching;
    match_descriptors(&p1, &d1, &p2, &d2, m.tau, m.threshold, MatchKind::Sparse)
}

/// Matches for one scene under the configured mode.
pub fn scene_matches(scene: &ScenePair, weights: Option<&Weights>, cfg: &EvalConfig) -> Result<MatchSet> {
    match cfg.mode {
        DescriptorMode::Trained => {
            let w = weights.ok_or_else(|| Error::invalid("trained mode needs weights"))?;
            let f1 = extract(&scene.image1, w, &cfg.matching.detect)?;
            let f2 = extract(&scene.image2, w, &cfg.matching.detect)?;
            let sparse = match_features_sparse(&f1, &f2, &cfg.matching)?;
            if cfg.semi_dense {
                semi_dense_from_sparse(&sparse, &f1.field, &f2.field, &cfg.matching)
            } else {
                Ok(sparse)
            }
        }
        _ => reference_matches(scene, cfg, scene.seed),
    }
}

fn pose_of(scene: &ScenePair, m: &MatchSet, cfg: &EvalConfig, seed: u64) -> PoseError {
    let (p1, p2) = (m.points1(), m.points2());
    let Ok((f, mask)) = ransac_fundamental(&p1, &p2, cfg.ransac_iters, cfg.ransac_thresh, seed) else {
        return PoseError::failure();
    };
    let (i1, i2): (Vec<_>, Vec<_>) = p1
        .iter()
        .zip(&p2)
        .zip(&mask)
        .filter(|(_, &k)| k)
        .map(|((&a, &b), _)| (a, b))
        .unzip();
    match recover_pose(&f, &scene.k1, &scene.k2, &i1, &i2) {
        Ok(est) => PoseError::between(&est, &scene.r, &scene.t),
        Err(_) => PoseError::failure(),
    }
}

fn corner_error_of(scene: &ScenePair, m: &MatchSet, cfg: &EvalConfig, seed: u64) -> Option<Option<f64>> {
    let h_gt = Homography::new(scene.homography_gt()?);
    let est = ransac_homography(&m.points1(), &m.points2(), cfg.ransac_iters, cfg.ransac_thresh, seed);
    Some(
        est.ok()
            .and_then(|(h, _)| homography_corner_error(&h, &h_gt, scene.width() as f64, scene.height() as f64)),
    )
}

/// Generates scene `index`, matches it and scores the estimated geometry.
pub fn evaluate_scene(index: usize, weights: Option<&Weights>, cfg: &EvalConfig) -> Result<SceneOutcome> {
    let seed = cfg.seed.wrapping_add(index as u64);
    let scene = synth_scene(seed, &cfg.scene)?;
    let m = scene_matches(&scene, weights, cfg)?;
    let pose = (cfg.scene.baseline > 0.0).then(|| pose_of(&scene, &m, cfg, seed));
    Ok(SceneOutcome {
        seed,
        matches: m.len(),
        pose,
        corner_error: corner_error_of(&scene, &m, cfg, seed),
    })
}

/// Pose AUC over scenes with an evaluated pose and MHA over planar scenes.
/// Outcomes are sorted by seed first, so the result does not depend on the
/// order they were produced in.
pub fn aggregate(outcomes: &[SceneOutcome]) -> Result<MetricReport> {
    let mut sorted = outcomes.to_vec();
    sorted.sort_by_key(|o| o.seed);
    let errors: Vec<f64> = sorted.iter().filter_map(|o| o.pose.map(|p| p.combined())).collect();
    let auc = if errors.is_empty() {
        Vec::new()
    } else {
        pose_auc(&errors, &POSE_THRESHOLDS)?
    };
    let corners: Vec<Option<f64>> = sorted.iter().filter_map(|o| o.corner_error).collect();
    let mha = if corners.is_empty() {
        Vec::new()
    } else {
        homography_mha(&corners, &MHA_THRESHOLDS)
    };
    Ok(MetricReport::new(&auc, &mha))
}

/// Sequential evaluation of every configured scene.
pub fn evaluate(weights: Option<&Weights>, cfg: &EvalConfig) -> Result<(MetricReport, Vec<SceneOutcome>)> {
    let outcomes = (0..cfg.scenes)
        .map(|i| evaluate_scene(i, weights, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&outcomes)?, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_code_is_unit_and_distinct() {
        let a = position_code((10.5, 20.5), 64, 64, 32);
        let b = position_code((11.5, 20.5), 64, 64, 32);
        assert_eq!(a.len(), 32);
        assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(dot < 1.0 - 1e-6);
    }

    #[test]
    fn identity_scenes_have_perfect_homography_accuracy() {
        let cfg = EvalConfig {
            scenes: 3,
            scene: SceneParams::identity(64, 64, DepthProfile::Plane),
            mode: DescriptorMode::Oracle,
            ..EvalConfig::default()
        };
        let (report, outcomes) = evaluate(None, &cfg).unwrap();
        assert!(outcomes.iter().all(|o| o.pose.is_none()));
        assert!(report.auc.is_empty());
        assert_eq!(report.mha["3"], 1.0);
    }
}
