//! Score-map network, strict-maximum NMS and differentiable sub-pixel
//! keypoint refinement.
//!
//! Keypoints use continuous image coordinates: pixel `(i, j)` covers
//! `[i, i+1) × [j, j+1)` and has its centre at `(i + 0.5, j + 0.5)`.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};
use crate::params::{init_conv, Bound, ParamStore};

/// Extents must be a multiple of this (the coarsest level is `1/32`).
pub const KEYPOINT_STRIDE: usize = 32;

/// Pooling factor from each level to the next: `1/1 → 1/2 → 1/8 → 1/32`.
const LEVEL_POOL: [usize; 4] = [1, 2, 4, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeypointNetConfig {
    /// Channels per pyramid level; the fused width is four times this.
    pub level_width: usize,
    pub head_width: usize,
    /// Odd spatial kernel of the level convolutions.
    pub kernel: usize,
}

impl Default for KeypointNetConfig {
    fn default() -> Self {
        Self {
            level_width: 32,
            head_width: 32,
            kernel: 3,
        }
    }
}

/// Detection thresholds shared by inference and training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub nms_window: usize,
    pub threshold: f64,
    pub t_det: f64,
    pub top_k: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            nms_window: 5,
            threshold: 0.2,
            t_det: 0.1,
            top_k: 500,
        }
    }
}

/// Per-pixel keypoint probabilities `[H × W]`, all in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    values: Tensor,
}

impl ScoreMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.is_empty() {
            return Err(Error::shape(format!(
                "score map must be a non-empty H×W tensor, got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("score map values must lie in [0, 1]"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values.data()[j * self.width() + i]
    }

    /// Bilinear score at a continuous image location.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (h, w) = (self.height(), self.width());
        let xi = (x - 0.5).clamp(0.0, (w - 1) as f64);
        let yi = (y - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (xi.floor() as usize, yi.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (xi - x0 as f64, yi - y0 as f64);
        (1.0 - fx) * (1.0 - fy) * self.at(x0, y0)
            + fx * (1.0 - fy) * self.at(x1, y0)
            + (1.0 - fx) * fy * self.at(x0, y1)
            + fx * fy * self.at(x1, y1)
    }
}

/// Integer NMS survivor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelKeypoint {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

/// Sub-pixel keypoint in continuous image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

fn check_window(n: usize) -> Result<usize> {
    if n == 0 || n.is_multiple_of(2) {
        return Err(Error::invalid(format!("NMS window must be odd, got {n}")));
    }
    Ok(n / 2)
}

/// Fresh keypoint-branch parameters under the `kp.` prefix.
pub fn init_keypoint_params<R: Rng + ?Sized>(cfg: &KeypointNetConfig, rng: &mut R) -> Result<ParamStore> {
    if cfg.kernel.is_multiple_of(2) || cfg.level_width == 0 || cfg.head_width == 0 {
        return Err(Error::invalid("keypoint net needs an odd kernel and positive widths"));
    }
    let (k, w) = (cfg.kernel, cfg.level_width);
    let mut store = ParamStore::new();
    for l in 0..LEVEL_POOL.len() {
        let cin = if l == 0 { 3 } else { w };
        store.insert(format!("kp.l{l}.conv_in"), init_conv(k, cin, w, rng));
        store.insert(format!("kp.l{l}.bias_in"), Tensor::zeros(&[w]));
        store.insert(format!("kp.l{l}.conv_res"), init_conv(k, w, w, rng).map(|v| v * 0.5));
        store.insert(format!("kp.l{l}.bias_res"), Tensor::zeros(&[w]));
    }
    store.insert("kp.head1", init_conv(1, 4 * w, cfg.head_width, rng));
    store.insert("kp.head1_bias", Tensor::zeros(&[cfg.head_width]));
    store.insert("kp.head2", init_conv(1, cfg.head_width, 1, rng).map(|v| v * 0.5));
    store.insert("kp.head2_bias", Tensor::zeros(&[1]));
    Ok(store)
}

/// `conv(x) + b` over an `H × W × C` map, same padding.
pub(crate) fn conv_bias<'t>(x: Var<'t>, kernel: Var<'t>, bias: Var<'t>, stride: usize) -> Result<Var<'t>> {
    let k = kernel.shape()[0];
    let y = x.conv2d(kernel, stride, k / 2)?;
    let s = y.shape();
    y.reshape(&[s[0] * s[1], s[2]])?.add_row(bias)?.reshape(&s)
}

fn check_extents(h: usize, w: usize, multiple: usize, what: &str) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(multiple) || !w.is_multiple_of(multiple) {
        return Err(Error::shape(format!(
            "{what} needs extents divisible by {multiple}, got {h}×{w}; pad the image to the next multiple of {multiple}"
        )));
    }
    Ok(())
}

/// Score map on the tape: `[H × W]` sigmoid probabilities.
pub fn score_map_vars<'t>(image: Var<'t>, bound: &Bound<'t>, cfg: &KeypointNetConfig) -> Result<Var<'t>> {
    let s = image.shape();
    let [h, w, 3] = s[..] else {
        return Err(Error::shape(format!("image must be H×W×3, got {s:?}")));
    };
    check_extents(h, w, KEYPOINT_STRIDE, "score_map")?;
    let first = bound.get("kp.l0.conv_in")?.shape();
    if first != [cfg.kernel, cfg.kernel, 3, cfg.level_width] {
        return Err(Error::shape(format!(
            "keypoint weights {first:?} do not match the configured kernel {} and width {}",
            cfg.kernel, cfg.level_width
        )));
    }
    let mut x = image;
    let mut levels = Vec::with_capacity(LEVEL_POOL.len());
    for (l, &pool) in LEVEL_POOL.iter().enumerate() {
        if pool > 1 {
            x = x.avg_pool2d(pool)?;
        }
        let p = |n: &str| bound.get(&format!("kp.l{l}.{n}"));
        x = conv_bias(x, p("conv_in")?, p("bias_in")?, 1)?.silu();
        x = x.add(conv_bias(x, p("conv_res")?, p("bias_res")?, 1)?.silu())?;
        levels.push(if pool == 1 && l == 0 {
            x
        } else {
            x.resize_bilinear(h, w)?
        });
    }
    let fused = Var::concat_last(&levels)?;
    let hidden = conv_bias(fused, bound.get("kp.head1")?, bound.get("kp.head1_bias")?, 1)?.silu();
    let logits = conv_bias(hidden, bound.get("kp.head2")?, bound.get("kp.head2_bias")?, 1)?;
    logits.sigmoid().reshape(&[h, w])
}

/// Evaluates the keypoint network on an `H × W × 3` image.
pub fn score_map(image: &Tensor, params: &ParamStore, cfg: &KeypointNetConfig) -> Result<ScoreMap> {
    let tape = Tape::new();
    let bound = params.bind(&tape, |_| false);
    let s = score_map_vars(tape.constant(image.clone()), &bound, cfg)?;
    let values = (*s.value()).clone();
    if !values.all_finite() {
        return Err(Error::NonFinite("score map".into()));
    }
    ScoreMap::new(values)
}

/// Pixels that strictly exceed every other score in their `N × N` window and
/// reach `threshold`. Pixels closer than `(N−1)/2` to the border are skipped.
pub fn nms_local_max(s: &ScoreMap, n: usize, threshold: f64) -> Result<Vec<PixelKeypoint>> {
    let r = check_window(n)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let (h, w) = (s.height(), s.width());
    let mut out = Vec::new();
    if h <= 2 * r || w <= 2 * r {
        return Ok(out);
    }
    for j in r..h - r {
        'pixel: for i in r..w - r {
            let v = s.at(i, j);
            if v < threshold {
                continue;
            }
            for jj in j - r..=j + r {
                for ii in i - r..=i + r {
                    if (ii, jj) != (i, j) && s.at(ii, jj) >= v {
                        continue 'pixel;
                    }
                }
            }
            out.push(PixelKeypoint { i, j, score: v });
        }
    }
    Ok(out)
}

/// Soft-argmax offset of an `N × N` window (row-major, `window[dj][di]`).
/// Offsets are measured from the window centre, `x` along columns.
pub fn soft_offset(window: &[f64], n: usize, t_det: f64) -> Result<(f64, f64)> {
    let r = check_window(n)? as f64;
    if window.len() != n * n {
        return Err(Error::shape(format!(
            "window needs {} values, got {}",
            n * n,
            window.len()
        )));
    }
    let probs = crate::numeric::softmax(&Tensor::new(&[n * n], window.to_vec())?, t_det)?;
    let (mut ox, mut oy) = (0.0, 0.0);
    for (idx, p) in probs.data().iter().enumerate() {
        ox += p * ((idx % n) as f64 - r);
        oy += p * ((idx / n) as f64 - r);
    }
    Ok((ox, oy))
}

fn window_of(s: &ScoreMap, p: (usize, usize), n: usize) -> Result<Vec<f64>> {
    let r = check_window(n)?;
    let (i, j) = p;
    if i < r || j < r || i + r >= s.width() || j + r >= s.height() {
        return Err(Error::invalid(format!(
            "{n}×{n} window at pixel ({i}, {j}) overruns the {}×{} map",
            s.width(),
            s.height()
        )));
    }
    let mut out = Vec::with_capacity(n * n);
    for jj in j - r..=j + r {
        for ii in i - r..=i + r {
            out.push(s.at(ii, jj));
        }
    }
    Ok(out)
}

/// Sub-pixel refinement of an NMS pixel by a temperature-`t_det` softmax over
/// its window followed by the expected offset.
pub fn dkd_refine(s: &ScoreMap, p_nms: (usize, usize), n: usize, t_det: f64) -> Result<Keypoint> {
    let window = window_of(s, p_nms, n)?;
    let (ox, oy) = soft_offset(&window, n, t_det)?;
    let x = p_nms.0 as f64 + 0.5 + ox;
    let y = p_nms.1 as f64 + 0.5 + oy;
    Ok(Keypoint {
        x,
        y,
        score: s.sample(x, y),
    })
}

/// Refined keypoint coordinates `[P × 2]` on the tape, differentiable in the
/// score map `[H × W]`.
pub fn dkd_refine_vars<'t>(score: Var<'t>, pixels: &[(usize, usize)], n: usize, t_det: f64) -> Result<Var<'t>> {
    let probs = window_softmax(score, pixels, n, t_det)?;
    let base: Vec<f64> = pixels
        .iter()
        .flat_map(|&(i, j)| [i as f64 + 0.5, j as f64 + 0.5])
        .collect();
    let tape = score.tape();
    probs
        .matmul(tape.constant(window_grid(n)))?
        .add(tape.constant(Tensor::new(&[pixels.len(), 2], base)?))
}

/// Window offsets `[N² × 2]` in row-major window order, centred on zero.
pub(crate) fn window_grid(n: usize) -> Tensor {
    let r = (n / 2) as f64;
    Tensor::from_fn(&[n * n, 2], |e| {
        let cell = e / 2;
        let d = if e % 2 == 0 { cell % n } else { cell / n };
        d as f64 - r
    })
}

/// Softmax of `S / t_det` over the `N×N` window around each pixel: `[P × N²]`.
pub(crate) fn window_softmax<'t>(score: Var<'t>, pixels: &[(usize, usize)], n: usize, t_det: f64) -> Result<Var<'t>> {
    let r = check_window(n)?;
    let s = score.shape();
    let [h, w] = s[..] else {
        return Err(Error::shape(format!("score map must be H×W, got {s:?}")));
    };
    let mut idx = Vec::with_capacity(pixels.len() * n * n);
    for &(i, j) in pixels {
        if i < r || j < r || i + r >= w || j + r >= h {
            return Err(Error::invalid(format!(
                "{n}×{n} window at pixel ({i}, {j}) overruns the {w}×{h} map"
            )));
        }
        for jj in j - r..=j + r {
            for ii in i - r..=i + r {
                idx.push(jj * w + ii);
            }
        }
    }
    score
        .reshape(&[h * w])?
        .gather(&idx)?
        .reshape(&[pixels.len(), n * n])?
        .softmax_last(t_det)
}

/// The `k` best keypoints by descending score; ties go to smaller `(y, x)`.
pub fn topk_keypoints(kps: &[Keypoint], k: usize) -> Vec<Keypoint> {
    let mut v = kps.to_vec();
    v.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    v.truncate(k);
    v
}

/// NMS, refinement and top-K selection on a computed score map.
pub fn detect_on_map(s: &ScoreMap, cfg: &DetectConfig) -> Result<Vec<Keypoint>> {
    let pixels = nms_local_max(s, cfg.nms_window, cfg.threshold)?;
    let kps = pixels
        .iter()
        .map(|p| dkd_refine(s, (p.i, p.j), cfg.nms_window, cfg.t_det))
        .collect::<Result<Vec<_>>>()?;
    Ok(topk_keypoints(&kps, cfg.top_k))
}

/// `[{"x":…,"y":…,"score":…}]` with six decimals.
pub fn keypoints_to_json(kps: &[Keypoint]) -> String {
    let mut s = String::from("[");
    for (n, k) in kps.iter().enumerate() {
        if n > 0 {
            s.push(',');
        }
        let _ = write!(s, "{{\"x\":{:.6},\"y\":{:.6},\"score\":{:.6}}}", k.x, k.y, k.score);
    }
    s.push(']');
    s
}
