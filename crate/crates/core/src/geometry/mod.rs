//! Synthetic two-view geometry, ground-truth warping, robust estimation and
//! evaluation metrics.

mod epipolar;
mod metrics;
mod scene;

pub use epipolar::{
    eight_point, ransac_fundamental, recover_pose, rotation_error_deg, symmetric_epipolar_distance,
    translation_error_deg, FundamentalMatrix, PoseError, PoseEstimate,
};
pub use metrics::{
    homography_corner_error, homography_dlt, homography_mha, pose_auc, ransac_homography, Homography, MetricReport,
    MHA_THRESHOLDS, POSE_THRESHOLDS,
};
pub use scene::{
    gt_correspondences, intrinsics, overlap_count, synth_scene, texture, warp_points, DepthProfile, Direction,
    GroundTruthMatches, ScenePair, SceneParams, Surface, ROUND_TRIP_TOL,
};
