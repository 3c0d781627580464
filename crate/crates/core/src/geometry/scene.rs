//! Procedural two-view scenes with analytic depth and a shared 3-D texture.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Shape of the surface seen by both cameras.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthProfile {
    /// Tilted plane.
    Plane,
    /// Smooth roof-like ridge nearest to the camera along one line.
    Ridge,
    /// Plane perturbed by smooth Gaussian bumps.
    Cloud,
}

impl std::str::FromStr for DepthProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(Self::Plane),
            "ridge" => Ok(Self::Ridge),
            "cloud" => Ok(Self::Cloud),
            _ => Err(Error::invalid(format!("unknown depth profile `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub profile: DepthProfile,
    /// Baseline over mean scene depth. Zero gives a pure-rotation pair.
    pub baseline: f64,
    /// Relative rotation angle in degrees.
    pub rotation_deg: f64,
    /// Focal length over image width.
    pub focal_ratio: f64,
    /// Rotation axis in camera-1 coordinates; random when absent.
    pub axis: Option<[f64; 3]>,
    /// Translation direction in camera-2 coordinates; random and mostly
    /// lateral when absent.
    pub direction: Option<[f64; 3]>,
    /// Maximum plane tilt (slope) for plane-based profiles.
    pub tilt: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            profile: DepthProfile::Plane,
            baseline: 0.1,
            rotation_deg: 3.0,
            focal_ratio: 1.0,
            axis: None,
            direction: None,
            tilt: 0.3,
        }
    }
}

impl SceneParams {
    pub fn identity(width: usize, height: usize, profile: DepthProfile) -> Self {
        Self {
            width,
            height,
            profile,
            baseline: 0.0,
            rotation_deg: 0.0,
            axis: Some([0.0, 1.0, 0.0]),
            direction: Some([1.0, 0.0, 0.0]),
            ..Self::default()
        }
    }

    /// Half the default motion: baseline 0.05, rotation 1.5°.
    pub fn near_identity(width: usize, height: usize, profile: DepthProfile) -> Self {
        Self {
            width,
            height,
            profile,
            baseline: 0.05,
            rotation_deg: 1.5,
            ..Self::default()
        }
    }
}

/// Depth surface `Z = f(X, Y)` in camera-1 coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub profile: DepthProfile,
    pub z0: f64,
    /// Slopes `dZ/dX`, `dZ/dY` of the base plane.
    pub slope: [f64; 2],
    /// Ridge direction angle and softness.
    pub ridge: [f64; 2],
    /// Bumps `(cx, cy, amplitude, sigma)`.
    pub bumps: Vec<[f64; 4]>,
    /// Seed of the 3-D texture.
    pub texture_seed: u64,
}

impl Surface {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let base = self.z0 + self.slope[0] * x + self.slope[1] * y;
        match self.profile {
            DepthProfile::Plane => base,
            DepthProfile::Ridge => {
                let (s, c) = self.ridge[0].sin_cos();
                let u = c * x + s * y;
                base + 0.6 * ((u * u + self.ridge[1] * self.ridge[1]).sqrt() - self.ridge[1])
            }
            DepthProfile::Cloud => {
                base + self
                    .bumps
                    .iter()
                    .map(|b| {
                        let d2 = (x - b[0]).powi(2) + (y - b[1]).powi(2);
                        b[2] * (-d2 / (2.0 * b[3] * b[3])).exp()
                    })
                    .sum::<f64>()
            }
        }
    }

    /// Plane `nᵀX = d` when the surface is planar.
    pub fn plane(&self) -> Option<(Vector3<f64>, f64)> {
        (self.profile == DepthProfile::Plane).then(|| (Vector3::new(-self.slope[0], -self.slope[1], 1.0), self.z0))
    }

    /// First intersection parameter of `origin + s·dir` with the surface.
    fn intersect(&self, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<f64> {
        let g = |s: f64| {
            let p = origin + dir * s;
            p.z - self.height(p.x, p.y)
        };
        let (lo, hi) = (0.2 * self.z0, 5.0 * self.z0);
        const STEPS: usize = 600;
        let mut a = lo;
        if g(a) >= 0.0 {
            return None;
        }
        for n in 1..=STEPS {
            let b = lo + (hi - lo) * n as f64 / STEPS as f64;
            let gb = g(b);
            if gb >= 0.0 {
                let (mut l, mut r) = (a, b);
                for _ in 0..80 {
                    let m = 0.5 * (l + r);
                    if g(m) < 0.0 {
                        l = m;
                    } else {
                        r = m;
                    }
                    if r - l <= f64::EPSILON * r {
                        break;
                    }
                }
                return Some(0.5 * (l + r));
            }
            a = b;
        }
        None
    }
}

fn hash3(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (z as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, p: Vector3<f64>) -> f64 {
    let f = p.map(f64::floor);
    let t = (p - f).map(|v| v * v * (3.0 - 2.0 * v));
    let (x, y, z) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for (dx, wx) in [(0, 1.0 - t.x), (1, t.x)] {
        for (dy, wy) in [(0, 1.0 - t.y), (1, t.y)] {
            for (dz, wz) in [(0, 1.0 - t.z), (1, t.z)] {
                acc += wx * wy * wz * hash3(seed, x + dx, y + dy, z + dz);
            }
        }
    }
    acc
}

/// RGB texture in `[0, 1]` at a 3-D point; `scale` maps world units to
/// texture cells.
pub fn texture(seed: u64, p: Vector3<f64>, scale: f64) -> [f64; 3] {
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let mut amp = 0.55;
        let mut freq = scale;
        let mut v = 0.0;
        let mut norm = 0.0;
        for octave in 0..3u64 {
            let s = seed.wrapping_add(1000 * c as u64 + 17 * octave);
            v += amp * value_noise(s, p * freq);
            norm += amp;
            amp *= 0.55;
            freq *= 2.0;
        }
        *out = v / norm;
    }
    rgb
}

/// Two calibrated views of one textured surface.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub seed: u64,
    pub params: SceneParams,
    pub surface: Surface,
    pub k1: Matrix3<f64>,
    pub k2: Matrix3<f64>,
    /// `X₂ = R·X₁ + t`.
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    /// `[H × W]` depth along each optical axis; zero where invalid.
    pub depth1: Tensor,
    pub depth2: Tensor,
    /// `[H × W × 3]` in `[0, 1]`.
    pub image1: Tensor,
    pub image2: Tensor,
}

/// Which way to map points between the two views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    OneToTwo,
    TwoToOne,
}

pub fn intrinsics(width: usize, height: usize, focal_ratio: f64) -> Matrix3<f64> {
    let f = focal_ratio * width as f64;
    Matrix3::new(f, 0.0, width as f64 / 2.0, 0.0, f, height as f64 / 2.0, 0.0, 0.0, 1.0)
}

fn unit_or_err(v: [f64; 3], what: &str) -> Result<Unit<Vector3<f64>>> {
    Unit::try_new(Vector3::from(v), 1e-12).ok_or_else(|| Error::invalid(format!("{what} must be a nonzero vector")))
}

/// Renders a scene deterministically from `seed`.
pub fn synth_scene(seed: u64, params: &SceneParams) -> Result<ScenePair> {
    let (w, h) = (params.width, params.height);
    if w == 0 || h == 0 || w % 64 != 0 || h % 64 != 0 {
        return Err(Error::invalid(format!(
            "scene extents must be positive multiples of 64, got {w}×{h}"
        )));
    }
    if !(params.baseline >= 0.0) || !params.rotation_deg.is_finite() || !(params.focal_ratio > 0.0) {
        return Err(Error::invalid("baseline must be ≥ 0 and focal ratio > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k1 = intrinsics(w, h, params.focal_ratio);
    let k2 = k1;

    let z0 = if params.baseline > 0.0 {
        1.0 / params.baseline
    } else {
        10.0
    };
    let tilt = params.tilt;
    let slope = [rng.random_range(-tilt..=tilt), rng.random_range(-tilt..=tilt)];
    let half_w = 0.5 * w as f64 / (params.focal_ratio * w as f64) * z0;
    let ridge = [rng.random_range(0.0..std::f64::consts::PI), 0.15 * half_w];
    let bumps = (0..6)
        .map(|_| {
            [
                rng.random_range(-half_w..half_w),
                rng.random_range(-half_w..half_w),
                rng.random_range(-0.12..0.12) * z0,
                rng.random_range(0.25..0.5) * half_w,
            ]
        })
        .collect();
    let surface = Surface {
        profile: params.profile,
        z0,
        slope,
        ridge,
        bumps,
        texture_seed: rng.random(),
    };

    let axis = match params.axis {
        Some(a) => unit_or_err(a, "rotation axis")?,
        None => Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..0.3),
        )),
    };
    let r = *Rotation3::from_axis_angle(&axis, params.rotation_deg.to_radians()).matrix();
    let t = if params.baseline > 0.0 {
        match params.direction {
            Some(d) => unit_or_err(d, "translation direction")?.into_inner(),
            None => {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                Vector3::new(sign, rng.random_range(-0.4..0.4), rng.random_range(-0.2..0.2)).normalize()
            }
        }
    } else {
        Vector3::zeros()
    };

    let tex_scale = params.focal_ratio * w as f64 / (z0 * 6.0);
    let render = |k: &Matrix3<f64>, origin: Vector3<f64>, to_world: &Matrix3<f64>| {
        let kinv = k.try_inverse().expect("intrinsics are invertible");
        let mut depth = vec![0.0; h * w];
        let mut img = vec![0.0; h * w * 3];
        for j in 0..h {
            for i in 0..w {
                let ray = kinv * Vector3::new(i as f64 + 0.5, j as f64 + 0.5, 1.0);
                let dir = to_world * ray;
                if let Some(s) = surface.intersect(origin, dir) {
                    depth[j * w + i] = s;
                    let c = texture(surface.texture_seed, origin + dir * s, tex_scale);
                    img[(j * w + i) * 3..(j * w + i) * 3 + 3].copy_from_slice(&c);
                }
            }
        }
        (
            Tensor::new(&[h, w], depth).expect("depth shape"),
            Tensor::new(&[h, w, 3], img).expect("image shape"),
        )
    };
    let (depth1, image1) = render(&k1, Vector3::zeros(), &Matrix3::identity());
    let (depth2, image2) = render(&k2, -r.transpose() * t, &r.transpose());
    Ok(ScenePair {
        seed,
        params: params.clone(),
        surface,
        k1,
        k2,
        r,
        t,
        depth1,
        depth2,
        image1,
        image2,
    })
}

/// Inverse depth at a continuous image point, bilinear over pixel centres.
/// `None` when any contributing tap is invalid.
fn inverse_depth(depth: &Tensor, x: f64, y: f64) -> Option<f64> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let (xi, yi) = (x - 0.5, y - 0.5);
    if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
        return None;
    }
    let xc = xi.clamp(0.0, (w - 1) as f64);
    let yc = yi.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
    let mut acc = 0.0;
    for (xx, yy, wt) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        if wt == 0.0 {
            continue;
        }
        let d = depth.data()[yy * w + xx];
        if !(d > 0.0) {
            return None;
        }
        acc += wt / d;
    }
    Some(acc)
}

impl ScenePair {
    pub fn width(&self) -> usize {
        self.params.width
    }

    pub fn height(&self) -> usize {
        self.params.height
    }

    fn view(&self, dir: Direction) -> (&Tensor, Matrix3<f64>, Matrix3<f64>, Matrix3<f64>, Vector3<f64>) {
        match dir {
            Direction::OneToTwo => (&self.depth1, self.k1, self.k2, self.r, self.t),
            Direction::TwoToOne => {
                let rt = self.r.transpose();
                (&self.depth2, self.k2, self.k1, rt, -rt * self.t)
            }
        }
    }

    /// Maps one continuous point; `None` when depth is missing or the
    /// projection leaves the target image.
    pub fn warp_point(&self, p: (f64, f64), dir: Direction) -> Option<(f64, f64)> {
        let (depth, ks, kt, r, t) = self.view(dir);
        let inv = inverse_depth(depth, p.0, p.1)?;
        let ray = ks.try_inverse()? * Vector3::new(p.0, p.1, 1.0);
        let x = r * (ray / inv) + t;
        if !(x.z > 0.0) {
            return None;
        }
        let q = kt * x;
        let (u, v) = (q.x / q.z, q.y / q.z);
        (u >= 0.0 && v >= 0.0 && u < self.width() as f64 && v < self.height() as f64).then_some((u, v))
    }

    /// Relative pose with `‖t‖` unit (or zero) and the plane normal form.
    pub fn fundamental_gt(&self) -> Matrix3<f64> {
        let tx = self.t.cross_matrix();
        let k2i = self.k2.try_inverse().expect("intrinsics are invertible");
        let k1i = self.k1.try_inverse().expect("intrinsics are invertible");
        k2i.transpose() * tx * self.r * k1i
    }

    /// Plane-induced homography `K₂ (R + t nᵀ/d) K₁⁻¹` for planar scenes.
    pub fn homography_gt(&self) -> Option<Matrix3<f64>> {
        let (n, d) = self.surface.plane()?;
        let k1i = self.k1.try_inverse()?;
        Some(self.k2 * (self.r + self.t * n.transpose() / d) * k1i)
    }

    /// Whether `p` survives a round trip within `tol` pixels.
    pub fn round_trip(&self, p: (f64, f64), dir: Direction, tol: f64) -> Option<(f64, f64)> {
        let back = match dir {
            Direction::OneToTwo => Direction::TwoToOne,
            Direction::TwoToOne => Direction::OneToTwo,
        };
        let q = self.warp_point(p, dir)?;
        let b = self.warp_point(q, back)?;
        ((b.0 - p.0).hypot(b.1 - p.1) <= tol).then_some(q)
    }

    /// Writes image/depth tensors and `scene.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.image1.save(&dir.join("image1.dten"))?;
        self.image2.save(&dir.join("image2.dten"))?;
        self.depth1.save(&dir.join("depth1.dten"))?;
        self.depth2.save(&dir.join("depth2.dten"))?;
        let meta = SceneMeta {
            seed: self.seed,
            params: self.params.clone(),
            surface: self.surface.clone(),
            k1: mat_rows(&self.k1),
            k2: mat_rows(&self.k2),
            r: mat_rows(&self.r),
            t: [self.t.x, self.t.y, self.t.z],
        };
        fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    /// Reads a saved scene. Tensors come back rounded through `f32`.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: SceneMeta = serde_json::from_str(&fs::read_to_string(dir.join("scene.json"))?)?;
        Ok(Self {
            seed: meta.seed,
            params: meta.params,
            surface: meta.surface,
            k1: rows_mat(&meta.k1),
            k2: rows_mat(&meta.k2),
            r: rows_mat(&meta.r),
            t: Vector3::from(meta.t),
            depth1: Tensor::load(&dir.join("depth1.dten"))?,
            depth2: Tensor::load(&dir.join("depth2.dten"))?,
            image1: Tensor::load(&dir.join("image1.dten"))?,
            image2: Tensor::load(&dir.join("image2.dten"))?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    seed: u64,
    params: SceneParams,
    surface: Surface,
    k1: [[f64; 3]; 3],
    k2: [[f64; 3]; 3],
    r: [[f64; 3]; 3],
    t: [f64; 3],
}

fn mat_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]])
}

fn rows_mat(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

/// Warps every point; failures are `None`.
pub fn warp_points(scene: &ScenePair, pts: &[(f64, f64)], dir: Direction) -> Vec<Option<(f64, f64)>> {
    pts.iter().map(|&p| scene.warp_point(p, dir)).collect()
}

/// Round-trip tolerance for correspondences and overlap, in pixels.
pub const ROUND_TRIP_TOL: f64 = 0.5;

/// Ground-truth matches `(x1, y1, x2, y2)` at pixel centres.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMatches {
    pub rows: Vec<[f64; 4]>,
    pub seed: u64,
    /// Fewer than the requested count were available.
    pub incomplete: bool,
}

/// Samples up to `count` bidirectionally consistent pixel-centre matches.
pub fn gt_correspondences(scene: &ScenePair, count: usize, seed: u64) -> GroundTruthMatches {
    let (w, h) = (scene.width(), scene.height());
    let mut order: Vec<usize> = (0..w * h).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rows = Vec::with_capacity(count);
    for idx in order {
        if rows.len() == count {
            break;
        }
        let p = ((idx % w) as f64 + 0.5, (idx / w) as f64 + 0.5);
        if let Some(q) = scene.round_trip(p, Direction::OneToTwo, ROUND_TRIP_TOL) {
            rows.push([p.0, p.1, q.0, q.1]);
        }
    }
    GroundTruthMatches {
        incomplete: rows.len() < count,
        rows,
        seed: scene.seed,
    }
}

/// Matching pixels: the smaller of the two directional counts of pixel
/// centres whose round trip lands within half a pixel.
pub fn overlap_count(scene: &ScenePair) -> usize {
    let (w, h) = (scene.width(), scene.height());
    let count = |dir| {
        (0..w * h)
            .filter(|&idx| {
                let p = ((idx % w) as f64 + 0.5, (idx / w) as f64 + 0.5);
                scene.round_trip(p, dir, ROUND_TRIP_TOL).is_some()
            })
            .count()
    };
    count(Direction::OneToTwo).min(count(Direction::TwoToOne))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_scene_warps_to_itself() {
        let s = synth_scene(3, &SceneParams::identity(64, 64, DepthProfile::Cloud)).unwrap();
        assert_eq!(s.image1, s.image2);
        for p in [(0.5, 0.5), (10.25, 33.75), (63.5, 20.5)] {
            let q = s.warp_point(p, Direction::OneToTwo).unwrap();
            assert!((q.0 - p.0).abs() < 1e-9 && (q.1 - p.1).abs() < 1e-9);
        }
        assert_eq!(overlap_count(&s), 4096);
    }

    #[test]
    fn plane_warp_matches_homography() {
        let s = synth_scene(11, &SceneParams::default()).unwrap();
        let hmat = s.homography_gt().unwrap();
        let mut checked = 0;
        for j in (1..63).step_by(5) {
            for i in (1..63).step_by(5) {
                let p = (i as f64 + 0.3, j as f64 + 0.7);
                if let Some(q) = s.warp_point(p, Direction::OneToTwo) {
                    let v = hmat * Vector3::new(p.0, p.1, 1.0);
                    assert!((q.0 - v.x / v.z).abs() < 1e-6 && (q.1 - v.y / v.z).abs() < 1e-6);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn scenes_are_deterministic_and_round_trip() {
        let p = SceneParams {
            profile: DepthProfile::Ridge,
            ..SceneParams::default()
        };
        let a = synth_scene(5, &p).unwrap();
        assert_eq!(a, synth_scene(5, &p).unwrap());
        let gt = gt_correspondences(&a, 200, 1);
        assert_eq!(gt.rows.len(), 200);
        let f = a.fundamental_gt();
        for r in &gt.rows {
            let e = Vector3::new(r[2], r[3], 1.0).dot(&(f * Vector3::new(r[0], r[1], 1.0)));
            assert!(e.abs() < 1e-6, "{e}");
        }
    }

    #[test]
    fn facing_away_has_no_overlap() {
        let p = SceneParams {
            rotation_deg: 120.0,
            axis: Some([0.0, 1.0, 0.0]),
            ..SceneParams::default()
        };
        assert_eq!(overlap_count(&synth_scene(2, &p).unwrap()), 0);
    }

    #[test]
    fn archive_round_trip() {
        let s = synth_scene(9, &SceneParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = ScenePair::load(dir.path()).unwrap();
        assert_eq!(back.image1, s.image1.quantized());
        assert_eq!(back.r, s.r);
        assert_eq!(back.surface, s.surface);
    }
}
