//! Fundamental-matrix estimation, robust fitting and relative pose recovery.

use nalgebra::{DMatrix, Matrix3, Vector3, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Smallest ratio of the second-smallest to the largest singular value of the
/// design matrix before the solution is declared ambiguous.
const DEGENERACY_RATIO: f64 = 1e-10;

/// Rank-2 fundamental matrix with unit Frobenius norm. `p₂ᵀ F p₁ = 0` for
/// corresponding homogeneous points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FundamentalMatrix {
    m: Matrix3<f64>,
}

impl FundamentalMatrix {
    /// Projects onto rank 2, scales to unit norm and fixes the sign so the
    /// largest-magnitude entry is positive.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("fundamental matrix".into()));
        }
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
        let mut s = svd.singular_values;
        s[2] = 0.0;
        let r2 = u * Matrix3::from_diagonal(&s) * vt;
        let norm = r2.norm();
        if !(norm > 0.0) {
            return Err(Error::Degenerate("zero fundamental matrix".into()));
        }
        let mut m = r2 / norm;
        let big = m
            .iter()
            .copied()
            .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if big < 0.0 {
            m = -m;
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Epipolar line `F p₁` in image 2.
    pub fn line(&self, p: (f64, f64)) -> Vector3<f64> {
        self.m * Vector3::new(p.0, p.1, 1.0)
    }

    /// Mean of the two point-to-epipolar-line distances.
    pub fn symmetric_distance(&self, p1: (f64, f64), p2: (f64, f64)) -> f64 {
        symmetric_epipolar_distance(&self.m, p1, p2)
    }
}

/// Mean of `d(p₂, F p₁)` and `d(p₁, Fᵀ p₂)` in pixels.
pub fn symmetric_epipolar_distance(f: &Matrix3<f64>, p1: (f64, f64), p2: (f64, f64)) -> f64 {
    let x1 = Vector3::new(p1.0, p1.1, 1.0);
    let x2 = Vector3::new(p2.0, p2.1, 1.0);
    let l2 = f * x1;
    let l1 = f.transpose() * x2;
    let e = x2.dot(&l2);
    let d2 = e.abs() / l2.x.hypot(l2.y);
    let d1 = e.abs() / l1.x.hypot(l1.y);
    0.5 * (d1 + d2)
}

/// Similarity moving the centroid to the origin and the mean distance to √2.
fn normalizer(pts: &[(f64, f64)]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let mean = pts.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    if !(mean > 1e-12) || !mean.is_finite() {
        return Err(Error::Degenerate("points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply(t: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    let v = t * Vector3::new(p.0, p.1, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Unit null vector of a design matrix with 9 columns (rows zero-padded to
/// at least 9). Fails when the null space is not one-dimensional.
pub(crate) fn null_vector(rows: Vec<[f64; 9]>) -> Result<[f64; 9]> {
    let n = rows.len().max(9);
    let a = DMatrix::from_fn(n, 9, |i, j| rows.get(i).map_or(0.0, |r| r[j]));
    let svd = SVD::new(a, false, true);
    let vt = svd.v_t.expect("v requested");
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let (largest, second_last, last) = (s[order[0]], s[order[7]], order[8]);
    if !(largest > 0.0) || second_last / largest < DEGENERACY_RATIO {
        return Err(Error::Degenerate("correspondences do not fix a unique solution".into()));
    }
    Ok(std::array::from_fn(|j| vt[(last, j)]))
}

/// Normalized eight-point estimate from `n ≥ 8` correspondences.
pub fn eight_point(p1: &[(f64, f64)], p2: &[(f64, f64)]) -> Result<FundamentalMatrix> {
    if p1.len() != p2.len() {
        return Err(Error::shape("point lists differ in length"));
    }
    if p1.len() < 8 {
        return Err(Error::NotEnoughMatches {
            required: 8,
            got: p1.len(),
        });
    }
    if p1.iter().chain(p2).any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::NonFinite("correspondence".into()));
    }
    let (t1, t2) = (normalizer(p1)?, normalizer(p2)?);
    let rows = p1
        .iter()
        .zip(p2)
        .map(|(&a, &b)| {
            let (x1, y1) = apply(&t1, a);
            let (x2, y2) = apply(&t2, b);
            [x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, 1.0]
        })
        .collect();
    let f = null_vector(rows)?;
    let fhat = Matrix3::from_row_slice(&f);
    let rank2 = FundamentalMatrix::new(fhat)?;
    FundamentalMatrix::new(t2.transpose() * rank2.m * t1)
}

/// Best-consensus fundamental matrix over minimal samples, refit on its
/// inliers. Iteration `i` draws from its own stream so results depend only on
/// `seed`.
pub fn ransac_fundamental(
    p1: &[(f64, f64)],
    p2: &[(f64, f64)],
    iters: usize,
    thresh: f64,
    seed: u64,
) -> Result<(FundamentalMatrix, Vec<bool>)> {
    if p1.len() != p2.len() {
        return Err(Error::shape("point lists differ in length"));
    }
    if p1.len() < 8 {
        return Err(Error::NotEnoughMatches {
            required: 8,
            got: p1.len(),
        });
    }
    let mask_of = |f: &FundamentalMatrix| -> Vec<bool> {
        p1.iter()
            .zip(p2)
            .map(|(&a, &b)| f.symmetric_distance(a, b) <= thresh)
            .collect()
    };
    let mut best: Option<(usize, FundamentalMatrix)> = None;
    for it in 0..iters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(it as u64);
        let idx = rand::seq::index::sample(&mut rng, p1.len(), 8);
        let s1: Vec<_> = idx.iter().map(|i| p1[i]).collect();
        let s2: Vec<_> = idx.iter().map(|i| p2[i]).collect();
        let Ok(f) = eight_point(&s1, &s2) else { continue };
        let count = mask_of(&f).iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, f));
        }
    }
    let seedf = match best {
        Some((_, f)) => f,
        None => eight_point(p1, p2)?,
    };
    let mut f = seedf;
    let mut mask = mask_of(&f);
    for _ in 0..3 {
        let (a, b): (Vec<_>, Vec<_>) = p1
            .iter()
            .zip(p2)
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((&a, &b), _)| (a, b))
            .unzip();
        let Ok(refit) = eight_point(&a, &b) else { break };
        let new_mask = mask_of(&refit);
        let (old_n, new_n) = (
            mask.iter().filter(|&&m| m).count(),
            new_mask.iter().filter(|&&m| m).count(),
        );
        if new_n < old_n {
            break;
        }
        let done = new_mask == mask;
        f = refit;
        mask = new_mask;
        if done {
            break;
        }
    }
    Ok((f, mask))
}

/// Relative pose estimate `X₂ = R X₁ + t` with `‖t‖ = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEstimate {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    /// The correspondences are explained by a rotation alone, so `t` carries
    /// no information.
    pub translation_degenerate: bool,
    /// Correspondences in front of both cameras for the chosen solution.
    pub cheirality_votes: usize,
}

fn bearings(k: &Matrix3<f64>, pts: &[(f64, f64)]) -> Result<Vec<Vector3<f64>>> {
    let kinv = k
        .try_inverse()
        .ok_or_else(|| Error::invalid("intrinsics are singular"))?;
    Ok(pts.iter().map(|p| kinv * Vector3::new(p.0, p.1, 1.0)).collect())
}

/// Rotation best aligning unit bearings `a` onto `b` and the largest angular
/// residual in radians.
fn kabsch(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> (Matrix3<f64>, f64) {
    let mut h = Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        h += y.normalize() * x.normalize().transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    let worst = a
        .iter()
        .zip(b)
        .map(|(x, y)| (r * x.normalize()).angle(&y.normalize()))
        .fold(0.0, f64::max);
    (r, worst)
}

/// Depths `(λ₁, λ₂)` with `λ₂ x₂ ≈ R λ₁ x₁ + t` in the least-squares sense.
fn triangulate_depths(r: &Matrix3<f64>, t: &Vector3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> (f64, f64) {
    let a = r * x1;
    let b = -x2;
    let (aa, ab, bb) = (a.dot(&a), a.dot(&b), b.dot(&b));
    let (at, bt) = (a.dot(t), b.dot(t));
    let det = aa * bb - ab * ab;
    if det.abs() < 1e-18 {
        return (f64::NAN, f64::NAN);
    }
    let l1 = (-at * bb + bt * ab) / det;
    let l2 = (-bt * aa + at * ab) / det;
    (l1, l2)
}

/// Angular residual below which correspondences are treated as a pure
/// rotation.
const PURE_ROTATION_RAD: f64 = 1e-7;

/// Pose from `F`, intrinsics and inlier correspondences. Picks the candidate
/// decomposition of `E = K₂ᵀ F K₁` with the most points in front of both
/// cameras.
pub fn recover_pose(
    f: &FundamentalMatrix,
    k1: &Matrix3<f64>,
    k2: &Matrix3<f64>,
    p1: &[(f64, f64)],
    p2: &[(f64, f64)],
) -> Result<PoseEstimate> {
    if p1.len() != p2.len() || p1.is_empty() {
        return Err(Error::shape("need equally many, non-zero correspondences"));
    }
    let b1 = bearings(k1, p1)?;
    let b2 = bearings(k2, p2)?;
    let (r_rot, residual) = kabsch(&b1, &b2);
    if residual < PURE_ROTATION_RAD {
        return Ok(PoseEstimate {
            r: r_rot,
            t: Vector3::zeros(),
            translation_degenerate: true,
            cheirality_votes: p1.len(),
        });
    }

    let e = k2.transpose() * f.matrix() * k1;
    let svd = e.svd(true, true);
    let (mut u, mut vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t = u.column(2).into_owned();
    let candidates = [
        (u * w * vt, t),
        (u * w * vt, -t),
        (u * w.transpose() * vt, t),
        (u * w.transpose() * vt, -t),
    ];
    let mut best: Option<(usize, Matrix3<f64>, Vector3<f64>)> = None;
    for (r, t) in candidates {
        let votes = b1
            .iter()
            .zip(&b2)
            .filter(|(x1, x2)| {
                let (l1, l2) = triangulate_depths(&r, &t, x1, x2);
                l1 > 0.0 && l2 > 0.0
            })
            .count();
        if best.as_ref().is_none_or(|(v, _, _)| votes > *v) {
            best = Some((votes, r, t));
        }
    }
    match best {
        Some((votes, r, t)) if votes > 0 => Ok(PoseEstimate {
            r,
            t: t.normalize(),
            translation_degenerate: false,
            cheirality_votes: votes,
        }),
        _ => Err(Error::Degenerate(
            "no pose candidate places points in front of both cameras".into(),
        )),
    }
}

/// Angular rotation error in degrees.
pub fn rotation_error_deg(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let c = (((r_est.transpose() * r_gt).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Angle between translation directions in degrees, ignoring sign.
pub fn translation_error_deg(t_est: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    let (a, b) = (t_est.norm(), t_gt.norm());
    if !(a > 0.0 && b > 0.0) {
        return f64::INFINITY;
    }
    let c = (t_est.dot(t_gt) / (a * b)).clamp(-1.0, 1.0);
    let theta = c.acos().to_degrees();
    theta.min(180.0 - theta)
}

/// Rotation and translation-direction errors in degrees.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseError {
    pub rotation: f64,
    pub translation: f64,
}

impl PoseError {
    pub fn between(est: &PoseEstimate, r_gt: &Matrix3<f64>, t_gt: &Vector3<f64>) -> Self {
        Self {
            rotation: rotation_error_deg(&est.r, r_gt),
            translation: if est.translation_degenerate {
                f64::INFINITY
            } else {
                translation_error_deg(&est.t, t_gt)
            },
        }
    }

    /// A failed estimate.
    pub fn failure() -> Self {
        Self {
            rotation: f64::INFINITY,
            translation: f64::INFINITY,
        }
    }

    pub fn combined(&self) -> f64 {
        self.rotation.max(self.translation)
    }
}
