//! Pose AUC, homography estimation and mean homography accuracy.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::epipolar::null_vector;
use crate::error::{Error, Result};

pub const POSE_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];
pub const MHA_THRESHOLDS: [f64; 3] = [3.0, 5.0, 10.0];

/// Area under the recall-versus-error curve on `[0, T]`, divided by `T`.
///
/// The curve starts at `(0, 0)`, steps through the sorted errors with recall
/// `i/n` at the `i`-th error, and is integrated with the trapezoid rule up to
/// the first error not below `T`, where it is held flat. Infinite errors are
/// failures and only lower the recall.
pub fn pose_auc(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::invalid("pose_auc needs at least one error"));
    }
    if errors.iter().any(|e| e.is_nan() || *e < 0.0) {
        return Err(Error::invalid("pose errors must be non-negative"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut e = Vec::with_capacity(sorted.len() + 1);
    let mut r = Vec::with_capacity(sorted.len() + 1);
    e.push(0.0);
    r.push(0.0);
    for (i, v) in sorted.iter().enumerate() {
        e.push(*v);
        r.push((i + 1) as f64 / n);
    }
    thresholds
        .iter()
        .map(|&t| {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::invalid(format!("AUC threshold must be positive, got {t}")));
            }
            let last = e.partition_point(|&v| v < t);
            let mut area = 0.0;
            for i in 1..last {
                area += (e[i] - e[i - 1]) * (r[i] + r[i - 1]) / 2.0;
            }
            area += (t - e[last - 1]) * r[last - 1];
            Ok(area / t)
        })
        .collect()
}

/// Projective map of continuous image points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    pub m: Matrix3<f64>,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Self {
        Self { m }
    }

    /// `None` when the point maps to infinity.
    pub fn apply(&self, p: (f64, f64)) -> Option<(f64, f64)> {
        let v = self.m * Vector3::new(p.0, p.1, 1.0);
        (v.z.abs() > 1e-300).then(|| (v.x / v.z, v.y / v.z))
    }

    pub fn is_invertible(&self) -> bool {
        let d = self.m.determinant();
        d.is_finite() && d.abs() > 1e-12 * self.m.norm().powi(3)
    }
}

fn similarity(pts: &[(f64, f64)]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let mean = pts.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    if !(mean > 1e-12) {
        return Err(Error::Degenerate("points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Normalized direct linear transform from `n ≥ 4` correspondences.
pub fn homography_dlt(p1: &[(f64, f64)], p2: &[(f64, f64)]) -> Result<Homography> {
    if p1.len() != p2.len() {
        return Err(Error::shape("point lists differ in length"));
    }
    if p1.len() < 4 {
        return Err(Error::NotEnoughMatches {
            required: 4,
            got: p1.len(),
        });
    }
    let (t1, t2) = (similarity(p1)?, similarity(p2)?);
    let mut rows = Vec::with_capacity(2 * p1.len());
    for (&a, &b) in p1.iter().zip(p2) {
        let u = t1 * Vector3::new(a.0, a.1, 1.0);
        let v = t2 * Vector3::new(b.0, b.1, 1.0);
        let (x, y) = (u.x / u.z, u.y / u.z);
        let (xp, yp) = (v.x / v.z, v.y / v.z);
        rows.push([-x, -y, -1.0, 0.0, 0.0, 0.0, xp * x, xp * y, xp]);
        rows.push([0.0, 0.0, 0.0, -x, -y, -1.0, yp * x, yp * y, yp]);
    }
    let h = Matrix3::from_row_slice(&null_vector(rows)?);
    let t2i = t2.try_inverse().ok_or_else(|| Error::Degenerate("normalizer".into()))?;
    let m = t2i * h * t1;
    let scale = if m[(2, 2)].abs() > 1e-12 { m[(2, 2)] } else { m.norm() };
    Ok(Homography::new(m / scale))
}

/// Best-consensus homography over 4-point samples, refit on inliers.
pub fn ransac_homography(
    p1: &[(f64, f64)],
    p2: &[(f64, f64)],
    iters: usize,
    thresh: f64,
    seed: u64,
) -> Result<(Homography, Vec<bool>)> {
    if p1.len() != p2.len() {
        return Err(Error::shape("point lists differ in length"));
    }
    if p1.len() < 4 {
        return Err(Error::NotEnoughMatches {
            required: 4,
            got: p1.len(),
        });
    }
    let mask_of = |h: &Homography| -> Vec<bool> {
        p1.iter()
            .zip(p2)
            .map(|(&a, &b)| h.apply(a).is_some_and(|q| (q.0 - b.0).hypot(q.1 - b.1) <= thresh))
            .collect()
    };
    let mut best: Option<(usize, Homography)> = None;
    for it in 0..iters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(it as u64);
        let idx = rand::seq::index::sample(&mut rng, p1.len(), 4);
        let s1: Vec<_> = idx.iter().map(|i| p1[i]).collect();
        let s2: Vec<_> = idx.iter().map(|i| p2[i]).collect();
        let Ok(h) = homography_dlt(&s1, &s2) else { continue };
        let count = mask_of(&h).iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, h));
        }
    }
    let mut h = match best {
        Some((_, h)) => h,
        None => homography_dlt(p1, p2)?,
    };
    let mut mask = mask_of(&h);
    let (a, b): (Vec<_>, Vec<_>) = p1
        .iter()
        .zip(p2)
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|((&a, &b), _)| (a, b))
        .unzip();
    if let Ok(refit) = homography_dlt(&a, &b) {
        let m2 = mask_of(&refit);
        if m2.iter().filter(|&&v| v).count() >= a.len() {
            h = refit;
            mask = m2;
        }
    }
    Ok((h, mask))
}

/// Mean distance between the four image corners warped by each homography.
/// `None` (a failure) when either is singular or sends a corner to infinity.
pub fn homography_corner_error(h_est: &Homography, h_gt: &Homography, width: f64, height: f64) -> Option<f64> {
    if !h_est.is_invertible() || !h_gt.is_invertible() {
        return None;
    }
    let corners = [(0.0, 0.0), (width, 0.0), (width, height), (0.0, height)];
    let mut sum = 0.0;
    for c in corners {
        let a = h_est.apply(c)?;
        let b = h_gt.apply(c)?;
        sum += (a.0 - b.0).hypot(a.1 - b.1);
    }
    let e = sum / 4.0;
    e.is_finite().then_some(e)
}

/// Fraction of pairs whose mean corner error is within each threshold.
pub fn homography_mha(errors: &[Option<f64>], thresholds: &[f64]) -> Vec<f64> {
    if errors.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    thresholds
        .iter()
        .map(|&t| errors.iter().filter(|e| e.is_some_and(|v| v <= t)).count() as f64 / errors.len() as f64)
        .collect()
}

/// `{"auc":{"5":…,"10":…,"20":…},"mha":{"3":…,"5":…,"10":…}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: BTreeMap<String, f64>,
    pub mha: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(auc: &[f64], mha: &[f64]) -> Self {
        let key = |t: f64| format!("{t}");
        Self {
            auc: POSE_THRESHOLDS.iter().zip(auc).map(|(&t, &v)| (key(t), v)).collect(),
            mha: MHA_THRESHOLDS.iter().zip(mha).map(|(&t, &v)| (key(t), v)).collect(),
        }
    }

    /// Keys in ascending threshold order; absent thresholds are left out.
    pub fn to_json(&self) -> String {
        let fmt = |m: &BTreeMap<String, f64>, ts: &[f64]| {
            ts.iter()
                .filter_map(|t| m.get(&format!("{t}")).map(|v| format!("\"{t}\":{v}")))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "{{\"auc\":{{{}}},\"mha\":{{{}}}}}",
            fmt(&self.auc, &POSE_THRESHOLDS),
            fmt(&self.mha, &MHA_THRESHOLDS)
        )
    }
}
