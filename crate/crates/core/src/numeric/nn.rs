//! Image-shaped operations: bilinear sampling, resizing, convolution, pooling.
//!
//! Maps are `[H × W × C]` row-major. Sampling coordinates are in map index
//! units: `(x, y) = (i, j)` lands exactly on `map[j][i]`.

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn map_dims(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
        [h, w] if h > 0 && w > 0 => Ok((h, w, 1)),
        _ => Err(Error::shape(format!(
            "{op}: expected a non-empty H×W×C map, got {shape:?}"
        ))),
    }
}

/// Corner indices and fractional weights of one clamped bilinear lookup.
#[derive(Clone, Copy, Debug)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// Whether the coordinate moved the sample (false when clamped).
    live_x: bool,
    live_y: bool,
}

fn axis_tap(v: f64, extent: usize) -> (usize, usize, f64, bool) {
    let max = (extent - 1) as f64;
    let live = (0.0..=max).contains(&v) && extent > 1;
    let c = v.clamp(0.0, max);
    let lo = (c.floor() as usize).min(extent.saturating_sub(2));
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, c - lo as f64, live)
}

fn tap(x: f64, y: f64, h: usize, w: usize) -> Tap {
    let (x0, x1, fx, live_x) = axis_tap(x, w);
    let (y0, y1, fy, live_y) = axis_tap(y, h);
    Tap {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        live_x,
        live_y,
    }
}

fn sample_into(map: &[f64], w: usize, c: usize, t: &Tap, out: &mut [f64]) {
    let w00 = (1.0 - t.fx) * (1.0 - t.fy);
    let w10 = t.fx * (1.0 - t.fy);
    let w01 = (1.0 - t.fx) * t.fy;
    let w11 = t.fx * t.fy;
    let p00 = &map[(t.y0 * w + t.x0) * c..][..c];
    let p10 = &map[(t.y0 * w + t.x1) * c..][..c];
    let p01 = &map[(t.y1 * w + t.x0) * c..][..c];
    let p11 = &map[(t.y1 * w + t.x1) * c..][..c];
    for ch in 0..c {
        out[ch] = w00 * p00[ch] + w10 * p10[ch] + w01 * p01[ch] + w11 * p11[ch];
    }
}

fn check_points(points: &[f64]) -> Result<()> {
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampling coordinate".into()));
    }
    Ok(())
}

/// Bilinear interpolation of `map` at each `(x, y)`; coordinates outside the map
/// clamp to the border. Returns `[N × C]`.
pub fn bilinear_sample(map: &Tensor, points: &[(f64, f64)]) -> Result<Tensor> {
    let (h, w, c) = map_dims(map.shape(), "bilinear_sample")?;
    let flat: Vec<f64> = points.iter().flat_map(|&(x, y)| [x, y]).collect();
    check_points(&flat)?;
    let mut out = vec![0.0; points.len() * c];
    for (&(x, y), o) in points.iter().zip(out.chunks_exact_mut(c)) {
        sample_into(map.data(), w, c, &tap(x, y, h, w), o);
    }
    Ok(Tensor::from_parts(vec![points.len(), c], out))
}

/// Output extents of a convolution.
pub fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let (h, w, cin) = map_dims(input, "conv2d")?;
    let [k, k2, kcin, cout] = *kernel else {
        return Err(Error::shape(format!(
            "conv2d: kernel must be k×k×Cin×Cout, got {kernel:?}"
        )));
    };
    if k != k2 || k % 2 == 0 {
        return Err(Error::shape(format!(
            "conv2d: kernel must be square and odd, got {k}×{k2}"
        )));
    }
    if kcin != cin {
        return Err(Error::shape(format!(
            "conv2d: input has {cin} channels, kernel expects {kcin}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be ≥ 1"));
    }
    let ho =
        conv_out_extent(h, k, stride, pad).ok_or_else(|| Error::shape("conv2d: kernel larger than padded input"))?;
    let wo =
        conv_out_extent(w, k, stride, pad).ok_or_else(|| Error::shape("conv2d: kernel larger than padded input"))?;
    Ok(ConvGeom {
        h,
        w,
        cin,
        k,
        cout,
        ho,
        wo,
        stride,
        pad,
    })
}

impl ConvGeom {
    /// Calls `f(out_pixel, in_pixel, kernel_tap)` for every in-bounds pairing.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let o = oy * self.wo + ox;
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(o, iy as usize * self.w + ix as usize, ky * self.k + kx);
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &[f64], kern: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![0.0; g.ho * g.wo * cout];
    g.for_each(|o, i, t| {
        let orow = &mut out[o * cout..(o + 1) * cout];
        let xin = &x[i * cin..(i + 1) * cin];
        let kt = &kern[t * cin * cout..(t + 1) * cin * cout];
        for (ci, &xv) in xin.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (ov, kv) in orow.iter_mut().zip(&kt[ci * cout..(ci + 1) * cout]) {
                *ov += xv * kv;
            }
        }
    });
    out
}

/// Cross-correlation with zero padding. `input` is `[H × W × Cin]`, `kernel` is
/// `[k × k × Cin × Cout]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(input.shape(), kernel.shape(), stride, pad)?;
    let out = conv_forward(input.data(), kernel.data(), &g);
    Ok(Tensor::from_parts(vec![g.ho, g.wo, g.cout], out))
}

/// Source coordinate (index units) for output index `dst` when resizing an
/// axis from `from` to `to` samples with aligned pixel centres.
pub fn resize_source_coord(dst: usize, from: usize, to: usize) -> f64 {
    (dst as f64 + 0.5) * from as f64 / to as f64 - 0.5
}

fn resize_points(h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut pts = Vec::with_capacity(oh * ow * 2);
    for y in 0..oh {
        let sy = resize_source_coord(y, h, oh);
        for x in 0..ow {
            pts.push(resize_source_coord(x, w, ow));
            pts.push(sy);
        }
    }
    pts
}

/// Bilinear resize of a map with aligned pixel centres.
pub fn resize_bilinear(map: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w, c) = map_dims(map.shape(), "resize_bilinear")?;
    let pts = resize_points(h, w, oh, ow);
    let pairs: Vec<(f64, f64)> = pts.chunks_exact(2).map(|p| (p[0], p[1])).collect();
    let s = bilinear_sample(map, &pairs)?;
    s.reshape(&[oh, ow, c])
}

impl<'t> Var<'t> {
    /// Differentiable [`bilinear_sample`]: `self` is the `[H × W × C]` map and
    /// `points` an `[N × 2]` tensor of `(x, y)`. Gradients reach both.
    pub fn bilinear_sample(&self, points: Var<'t>) -> Result<Var<'t>> {
        let (map, pts) = (self.value(), points.value());
        let (h, w, c) = map_dims(map.shape(), "bilinear_sample")?;
        if pts.rank() != 2 || pts.shape()[1] != 2 {
            return Err(Error::shape(format!(
                "bilinear_sample: points must be N×2, got {:?}",
                pts.shape()
            )));
        }
        check_points(pts.data())?;
        let n = pts.shape()[0];
        let taps: Vec<Tap> = pts.data().chunks_exact(2).map(|p| tap(p[0], p[1], h, w)).collect();
        let mut out = vec![0.0; n * c];
        for (t, o) in taps.iter().zip(out.chunks_exact_mut(c)) {
            sample_into(map.data(), w, c, t, o);
        }
        let map_len = map.len();
        Ok(self.tape().record(
            Tensor::from_parts(vec![n, c], out),
            &[*self, points],
            Box::new(move |g, need| {
                let gmap = need[0].then(|| {
                    let mut gm = vec![0.0; map_len];
                    for (t, gr) in taps.iter().zip(g.chunks_exact(c)) {
                        let ws = [
                            ((t.y0 * w + t.x0), (1.0 - t.fx) * (1.0 - t.fy)),
                            ((t.y0 * w + t.x1), t.fx * (1.0 - t.fy)),
                            ((t.y1 * w + t.x0), (1.0 - t.fx) * t.fy),
                            ((t.y1 * w + t.x1), t.fx * t.fy),
                        ];
                        for (pix, wt) in ws {
                            if wt == 0.0 {
                                continue;
                            }
                            for (o, gv) in gm[pix * c..(pix + 1) * c].iter_mut().zip(gr) {
                                *o += wt * gv;
                            }
                        }
                    }
                    gm
                });
                let gpts = need[1].then(|| {
                    let m = map.data();
                    let mut gp = vec![0.0; n * 2];
                    for (k, (t, gr)) in taps.iter().zip(g.chunks_exact(c)).enumerate() {
                        let (mut dx, mut dy) = (0.0, 0.0);
                        for (ch, gv) in gr.iter().enumerate() {
                            let v00 = m[(t.y0 * w + t.x0) * c + ch];
                            let v10 = m[(t.y0 * w + t.x1) * c + ch];
                            let v01 = m[(t.y1 * w + t.x0) * c + ch];
                            let v11 = m[(t.y1 * w + t.x1) * c + ch];
                            dx += gv * ((1.0 - t.fy) * (v10 - v00) + t.fy * (v11 - v01));
                            dy += gv * ((1.0 - t.fx) * (v01 - v00) + t.fx * (v11 - v10));
                        }
                        gp[2 * k] = if t.live_x { dx } else { 0.0 };
                        gp[2 * k + 1] = if t.live_y { dy } else { 0.0 };
                    }
                    gp
                });
                vec![gmap, gpts]
            }),
        ))
    }

    /// Differentiable [`resize_bilinear`] (gradient flows to the map only).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (h, w, c) = map_dims(&shape, "resize_bilinear")?;
        if (h, w) == (oh, ow) {
            return self.reshape(&[h, w, c]);
        }
        let pts = self
            .tape()
            .constant(Tensor::from_parts(vec![oh * ow, 2], resize_points(h, w, oh, ow)));
        self.bilinear_sample(pts)?.reshape(&[oh, ow, c])
    }

    /// Differentiable [`conv2d`].
    pub fn conv2d(&self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, kern) = (self.value(), kernel.value());
        let g = conv_geom(x.shape(), kern.shape(), stride, pad)?;
        let out = conv_forward(x.data(), kern.data(), &g);
        let shape = vec![g.ho, g.wo, g.cout];
        Ok(self.tape().record(
            Tensor::from_parts(shape, out),
            &[*self, kernel],
            Box::new(move |gout, need| {
                let (cin, cout) = (g.cin, g.cout);
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0; x.len()];
                    let kd = kern.data();
                    g.for_each(|o, i, t| {
                        let go = &gout[o * cout..(o + 1) * cout];
                        let kt = &kd[t * cin * cout..(t + 1) * cin * cout];
                        for (ci, gxv) in gx[i * cin..(i + 1) * cin].iter_mut().enumerate() {
                            let krow = &kt[ci * cout..(ci + 1) * cout];
                            *gxv += go.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                    gx
                });
                let gk = need[1].then(|| {
                    let mut gk = vec![0.0; kern.len()];
                    let xd = x.data();
                    g.for_each(|o, i, t| {
                        let go = &gout[o * cout..(o + 1) * cout];
                        let gkt = &mut gk[t * cin * cout..(t + 1) * cin * cout];
                        for (ci, &xv) in xd[i * cin..(i + 1) * cin].iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for (o, gv) in gkt[ci * cout..(ci + 1) * cout].iter_mut().zip(go) {
                                *o += xv * gv;
                            }
                        }
                    });
                    gk
                });
                vec![gx, gk]
            }),
        ))
    }

    /// Average pooling over non-overlapping `f × f` blocks.
    pub fn avg_pool2d(&self, f: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (h, w, c) = map_dims(x.shape(), "avg_pool2d")?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!("avg_pool2d: {h}×{w} not divisible by {f}")));
        }
        let (ho, wo) = (h / f, w / f);
        let norm = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; ho * wo * c];
        for y in 0..h {
            for xx in 0..w {
                let o = ((y / f) * wo + xx / f) * c;
                let i = (y * w + xx) * c;
                for ch in 0..c {
                    out[o + ch] += x.data()[i + ch] * norm;
                }
            }
        }
        Ok(self.tape().record(
            Tensor::from_parts(vec![ho, wo, c], out),
            &[*self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; h * w * c];
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((y / f) * wo + xx / f) * c;
                        let i = (y * w + xx) * c;
                        for ch in 0..c {
                            gx[i + ch] = g[o + ch] * norm;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bilinear_mean_of_corners() {
        let map = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = bilinear_sample(&map, &[(0.5, 0.5)]).unwrap();
        assert_eq!(s.data(), &[1.5]);
    }

    #[test]
    fn bilinear_exact_on_grid_and_clamped_outside() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let map = Tensor::randn(&[4, 5, 2], 1.0, &mut rng);
        for j in 0..4 {
            for i in 0..5 {
                let s = bilinear_sample(&map, &[(i as f64, j as f64)]).unwrap();
                assert_eq!(s.data(), &[map.at(&[j, i, 0]), map.at(&[j, i, 1])]);
            }
        }
        let s = bilinear_sample(&map, &[(-3.0, 10.0)]).unwrap();
        assert_eq!(s.data(), &[map.at(&[3, 0, 0]), map.at(&[3, 0, 1])]);
    }

    #[test]
    fn bilinear_errors() {
        let map = Tensor::zeros(&[2, 2, 1]);
        assert!(bilinear_sample(&map, &[(f64::NAN, 0.0)]).is_err());
        assert!(bilinear_sample(&Tensor::zeros(&[0, 2, 1]), &[(0.0, 0.0)]).is_err());
    }

    #[test]
    fn conv_scaling_and_shapes() {
        let x = Tensor::full(&[3, 3, 1], 1.0);
        let k = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[3, 3, 1]);
        assert!(y.data().iter().all(|&v| v == 2.0));

        let x = Tensor::zeros(&[4, 4, 1]);
        let k = Tensor::zeros(&[3, 3, 1, 1]);
        assert_eq!(conv2d(&x, &k, 2, 1).unwrap().shape(), &[2, 2, 1]);
    }

    #[test]
    fn conv_impulse_gives_mirrored_kernel() {
        let mut x = Tensor::zeros(&[3, 3, 1]);
        x.data_mut()[4] = 1.0;
        let k = Tensor::new(&[3, 3, 1, 1], (1..=9).map(f64::from).collect()).unwrap();
        let y = conv2d(&x, &k, 1, 1).unwrap();
        // Direct summation: out[oy][ox] = Σ k[ky][kx] · x[oy+ky-1][ox+kx-1]
        let mut oracle = [0.0; 9];
        for oy in 0..3i32 {
            for ox in 0..3i32 {
                for ky in 0..3i32 {
                    for kx in 0..3i32 {
                        let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                        if (0..3).contains(&iy) && (0..3).contains(&ix) {
                            oracle[(oy * 3 + ox) as usize] +=
                                k.data()[(ky * 3 + kx) as usize] * x.data()[(iy * 3 + ix) as usize];
                        }
                    }
                }
            }
        }
        assert_eq!(y.data(), &oracle[..]);
        assert_eq!(y.data(), &[9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernels() {
        let x = Tensor::zeros(&[4, 4, 2]);
        assert!(conv2d(&x, &Tensor::zeros(&[3, 3, 1, 1]), 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[2, 2, 2, 1]), 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[3, 3, 2, 1]), 0, 1).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let m = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
        assert_eq!(resize_bilinear(&m, 4, 4).unwrap(), m);
        let c = Tensor::full(&[2, 3, 1], 0.7);
        let up = resize_bilinear(&c, 8, 12).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }
}
