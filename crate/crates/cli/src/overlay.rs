//! Side-by-side match overlays with lines coloured by epipolar error.

use defmatch::geometry::{Direction, ScenePair};
use defmatch::matcher::MatchSet;
use defmatch::numeric::Tensor;
use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Vector3};

/// Squared normalised epipolar error at or below which a line is green.
pub const EPIPOLAR_THRESHOLD: f64 = 1e-4;

pub const GREEN: Rgb<u8> = Rgb([0, 255, 0]);
pub const RED: Rgb<u8> = Rgb([255, 0, 0]);
/// Matches drawn without any reference geometry.
pub const YELLOW: Rgb<u8> = Rgb([255, 255, 0]);

/// Geometry used to score matches.
pub enum Reference {
    /// Essential matrix with the intrinsics of both views.
    Essential {
        e: Matrix3<f64>,
        k1_inv: Matrix3<f64>,
        k2_inv: Matrix3<f64>,
    },
    /// Pure rotation: the ground-truth transfer, compared in normalised
    /// coordinates of image 2.
    Transfer {
        scene: Box<ScenePair>,
        k2_inv: Matrix3<f64>,
    },
    None,
}

impl Reference {
    pub fn from_scene(scene: &ScenePair) -> Self {
        let k1_inv = scene.k1.try_inverse().expect("intrinsics are invertible");
        let k2_inv = scene.k2.try_inverse().expect("intrinsics are invertible");
        if scene.t.norm() == 0.0 {
            Reference::Transfer {
                scene: Box::new(scene.clone()),
                k2_inv,
            }
        } else {
            Reference::Essential {
                e: scene.t.cross_matrix() * scene.r,
                k1_inv,
                k2_inv,
            }
        }
    }

    /// Reference from a pixel-space fundamental matrix and shared intrinsics.
    pub fn from_fundamental(f: &Matrix3<f64>, k: &Matrix3<f64>) -> Self {
        let k_inv = k.try_inverse().expect("intrinsics are invertible");
        Reference::Essential {
            e: k.transpose() * f * k,
            k1_inv: k_inv,
            k2_inv: k_inv,
        }
    }

    /// Squared error in normalised coordinates; `None` without geometry or
    /// when the transfer leaves the image.
    pub fn error(&self, p1: (f64, f64), p2: (f64, f64)) -> Option<f64> {
        let h = |p: (f64, f64)| Vector3::new(p.0, p.1, 1.0);
        match self {
            Reference::Essential { e, k1_inv, k2_inv } => {
                Some(symmetric_squared(e, &(k1_inv * h(p1)), &(k2_inv * h(p2))))
            }
            Reference::Transfer { scene, k2_inv } => {
                let q = scene.warp_point(p1, Direction::OneToTwo)?;
                let (a, b) = (k2_inv * h(q), k2_inv * h(p2));
                Some((a / a.z - b / b.z).norm_squared())
            }
            Reference::None => None,
        }
    }

    pub fn colour(&self, p1: (f64, f64), p2: (f64, f64)) -> Rgb<u8> {
        match (self, self.error(p1, p2)) {
            (Reference::None, _) => YELLOW,
            (_, Some(err)) if err <= EPIPOLAR_THRESHOLD => GREEN,
            _ => RED,
        }
    }
}

/// `(x₂ᵀ E x₁)² (1/‖(E x₁)₀,₁‖² + 1/‖(Eᵀ x₂)₀,₁‖²)`.
pub fn symmetric_squared(e: &Matrix3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
    let l2 = e * x1;
    let l1 = e.transpose() * x2;
    let r = x2.dot(&l2);
    r * r * (1.0 / (l2.x * l2.x + l2.y * l2.y) + 1.0 / (l1.x * l1.x + l1.y * l1.y))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Pixel image from an `[H × W × 3]` tensor in `[0, 1]`.
pub fn to_rgb(image: &Tensor) -> RgbImage {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let o = ((y as usize) * w + x as usize) * 3;
        let d = image.data();
        Rgb([to_u8(d[o]), to_u8(d[o + 1]), to_u8(d[o + 2])])
    })
}

/// `[H × W × 3]` tensor in `[0, 1]` from a pixel image.
pub fn from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.pixels().flat_map(|p| p.0.map(|c| f64::from(c) / 255.0)).collect();
    Tensor::new(&[h as usize, w as usize, 3], data).expect("pixel count matches shape")
}

/// Bresenham segment clipped to the canvas.
fn draw_line(canvas: &mut RgbImage, a: (f64, f64), b: (f64, f64), colour: Rgb<u8>) {
    let (mut x0, mut y0) = (a.0.floor() as i64, a.1.floor() as i64);
    let (x1, y1) = (b.0.floor() as i64, b.1.floor() as i64);
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    let (w, h) = (i64::from(canvas.width()), i64::from(canvas.height()));
    loop {
        if (0..w).contains(&x0) && (0..h).contains(&y0) {
            canvas.put_pixel(x0 as u32, y0 as u32, colour);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Both images side by side with one line per match, drawn in match order.
pub fn render(image1: &Tensor, image2: &Tensor, matches: &MatchSet, reference: &Reference) -> RgbImage {
    let (a, b) = (to_rgb(image1), to_rgb(image2));
    let mut canvas = RgbImage::new(a.width() + b.width(), a.height().max(b.height()));
    image::imageops::replace(&mut canvas, &a, 0, 0);
    image::imageops::replace(&mut canvas, &b, i64::from(a.width()), 0);
    let shift = f64::from(a.width());
    for m in &matches.pairs {
        draw_line(
            &mut canvas,
            m.p1,
            (m.p2.0 + shift, m.p2.1),
            reference.colour(m.p1, m.p2),
        );
    }
    canvas
}

/// Line colours in drawing order.
pub fn colours(matches: &MatchSet, reference: &Reference) -> Vec<Rgb<u8>> {
    matches.pairs.iter().map(|m| reference.colour(m.p1, m.p2)).collect()
}
