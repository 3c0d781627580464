//! Single- and multi-scale deformable attention and the encoder stack.
//!
//! A query `z_q` attends to `K` sampled keys per head and level. Sampling
//! locations are the query's reference point plus offsets predicted linearly
//! from `z_q`; attention weights are a softmax over the `L·K` logits of each
//! head. Per-head projections are stored stacked: head `m` owns channels
//! `m·C/M .. (m+1)·C/M` of the value projection (`W'`) and the matching rows of
//! the output projection (`W`).

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};
use crate::params::{init_linear, linear, Bound, ParamStore};

/// Head/point/level counts and channel width of one attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DeformAttnConfig {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
}

impl DeformAttnConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn samples(&self) -> usize {
        self.heads * self.levels * self.points
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.points == 0 || self.levels == 0 || self.channels == 0 {
            return Err(Error::invalid("attention counts must be positive"));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "{} channels do not split into {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }
}

/// Weights of one deformable attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformAttnParams {
    pub config: DeformAttnConfig,
    /// `[C × C]`, the stacked per-head `W'_m`.
    pub value_proj: Tensor,
    /// `[C × M·L·K·2]`, offsets in pixels of the target level.
    pub offset_w: Tensor,
    pub offset_b: Tensor,
    /// `[C × M·L·K]`, attention logits.
    pub attn_w: Tensor,
    pub attn_b: Tensor,
    /// `[C × C]`, the stacked per-head `W_m`.
    pub output_proj: Tensor,
}

const PARAM_NAMES: [&str; 6] = ["value_proj", "offset_w", "offset_b", "attn_w", "attn_b", "output_proj"];

impl DeformAttnParams {
    /// Random projections with a zero offset predictor and zero attention
    /// logits, so every head starts as a uniform average at the reference point.
    pub fn init<R: Rng + ?Sized>(config: DeformAttnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let s = config.samples();
        Ok(Self {
            config,
            value_proj: init_linear(c, c, rng),
            offset_w: Tensor::zeros(&[c, s * 2]),
            offset_b: Tensor::zeros(&[s * 2]),
            attn_w: Tensor::zeros(&[c, s]),
            attn_b: Tensor::zeros(&[s]),
            output_proj: init_linear(c, c, rng),
        })
    }

    /// Identity projections with fixed offsets (`[M][L][K]` → `(dx, dy)`) and
    /// attention logits, the predictors ignoring the query.
    pub fn fixed(config: DeformAttnConfig, offsets: &[(f64, f64)], logits: &[f64]) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let s = config.samples();
        if offsets.len() != s || logits.len() != s {
            return Err(Error::shape(format!(
                "need {s} offsets and logits, got {} and {}",
                offsets.len(),
                logits.len()
            )));
        }
        let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        Ok(Self {
            config,
            value_proj: eye.clone(),
            offset_w: Tensor::zeros(&[c, s * 2]),
            offset_b: Tensor::from_parts(vec![s * 2], offsets.iter().flat_map(|&(x, y)| [x, y]).collect()),
            attn_w: Tensor::zeros(&[c, s]),
            attn_b: Tensor::from_parts(vec![s], logits.to_vec()),
            output_proj: eye,
        })
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.value_proj,
            &self.offset_w,
            &self.offset_b,
            &self.attn_w,
            &self.attn_b,
            &self.output_proj,
        ]
    }

    pub fn check_shapes(&self) -> Result<()> {
        let cfg = self.config;
        cfg.validate()?;
        let (c, s) = (cfg.channels, cfg.samples());
        let want: [Vec<usize>; 6] = [vec![c, c], vec![c, 2 * s], vec![2 * s], vec![c, s], vec![s], vec![c, c]];
        for ((name, t), w) in PARAM_NAMES.iter().zip(self.tensors()).zip(want) {
            if t.shape() != w.as_slice() {
                return Err(Error::shape(format!(
                    "attention `{name}` is {:?}, expected {w:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, store: &mut ParamStore, prefix: &str) {
        for (name, t) in PARAM_NAMES.iter().zip(self.tensors()) {
            store.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn read_from(store: &ParamStore, prefix: &str, config: DeformAttnConfig) -> Result<Self> {
        let g = |n: &str| store.get(&format!("{prefix}.{n}")).cloned();
        let p = Self {
            config,
            value_proj: g("value_proj")?,
            offset_w: g("offset_w")?,
            offset_b: g("offset_b")?,
            attn_w: g("attn_w")?,
            attn_b: g("attn_b")?,
            output_proj: g("output_proj")?,
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> AttnVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.var(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AttnVars {
            config: self.config,
            value_proj: leaf(&self.value_proj),
            offset_w: leaf(&self.offset_w),
            offset_b: leaf(&self.offset_b),
            attn_w: leaf(&self.attn_w),
            attn_b: leaf(&self.attn_b),
            output_proj: leaf(&self.output_proj),
        }
    }
}

/// Attention weights recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars<'t> {
    pub config: DeformAttnConfig,
    pub value_proj: Var<'t>,
    pub offset_w: Var<'t>,
    pub offset_b: Var<'t>,
    pub attn_w: Var<'t>,
    pub attn_b: Var<'t>,
    pub output_proj: Var<'t>,
}

impl<'t> AttnVars<'t> {
    pub fn from_bound(bound: &Bound<'t>, prefix: &str, config: DeformAttnConfig) -> Result<Self> {
        let g = |n: &str| bound.get(&format!("{prefix}.{n}"));
        Ok(Self {
            config,
            value_proj: g("value_proj")?,
            offset_w: g("offset_w")?,
            offset_b: g("offset_b")?,
            attn_w: g("attn_w")?,
            attn_b: g("attn_b")?,
            output_proj: g("output_proj")?,
        })
    }
}

/// Maps a normalized coordinate in `[0,1]²` onto a level's index grid, where
/// pixel `i` spans `[i/W, (i+1)/W)`.
pub fn normalized_to_level(p_hat: (f64, f64), h: usize, w: usize) -> (f64, f64) {
    (p_hat.0 * w as f64 - 0.5, p_hat.1 * h as f64 - 0.5)
}

/// Inverse of [`normalized_to_level`] for a pixel centre.
pub fn pixel_center_normalized(i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
    ((i as f64 + 0.5) / w as f64, (j as f64 + 0.5) / h as f64)
}

struct Tap {
    idx: [usize; 4],
    wts: [f64; 4],
    /// d(weights)/dx and d(weights)/dy, zero along clamped axes.
    dx: [f64; 4],
    dy: [f64; 4],
}

fn axis(v: f64, extent: usize) -> (usize, usize, f64, bool) {
    let max = (extent - 1) as f64;
    let live = extent > 1 && (0.0..=max).contains(&v);
    let c = v.clamp(0.0, max);
    let lo = (c.floor() as usize).min(extent.saturating_sub(2));
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, c - lo as f64, live)
}

fn make_tap(x: f64, y: f64, h: usize, w: usize) -> Tap {
    let (x0, x1, fx, lx) = axis(x, w);
    let (y0, y1, fy, ly) = axis(y, h);
    let (gx, gy) = (if lx { 1.0 } else { 0.0 }, if ly { 1.0 } else { 0.0 });
    Tap {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        wts: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        dx: [-(1.0 - fy) * gx, (1.0 - fy) * gx, -fy * gx, fy * gx],
        dy: [-(1.0 - fx) * gy, -fx * gy, (1.0 - fx) * gy, fx * gy],
    }
}

/// Batched sampling-and-weighting core.
///
/// * `values[l]`: `[H_l·W_l × C]` projected values of level `l`.
/// * `locations`: `[Nq × M·L·K·2]` sampling points in each level's index grid.
/// * `weights`: `[Nq × M·L·K]` attention weights.
///
/// Returns `[Nq × C]` with head `m` filling channels `m·C/M .. (m+1)·C/M`.
pub fn sample_and_weight<'t>(
    values: &[Var<'t>],
    level_hw: &[(usize, usize)],
    locations: Var<'t>,
    weights: Var<'t>,
    config: DeformAttnConfig,
) -> Result<Var<'t>> {
    config.validate()?;
    let (heads, levels, points, c) = (config.heads, config.levels, config.points, config.channels);
    if values.len() != levels || level_hw.len() != levels {
        return Err(Error::shape(format!(
            "expected {levels} levels, got {} values and {} extents",
            values.len(),
            level_hw.len()
        )));
    }
    let vals: Vec<_> = values.iter().map(|v| v.value()).collect();
    for (v, &(h, w)) in vals.iter().zip(level_hw) {
        if v.shape() != [h * w, c] {
            return Err(Error::shape(format!(
                "level values {:?} do not match {h}×{w}×{c}",
                v.shape()
            )));
        }
    }
    let (loc, att) = (locations.value(), weights.value());
    let s = config.samples();
    let nq = att.len() / s;
    if att.shape() != [nq, s] || loc.shape() != [nq, 2 * s] {
        return Err(Error::shape(format!(
            "locations {:?} / weights {:?} do not match {s} samples per query",
            loc.shape(),
            att.shape()
        )));
    }
    if loc.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampling location".into()));
    }
    let hd = c / heads;
    let mut taps = Vec::with_capacity(nq * s);
    let mut out = vec![0.0; nq * c];
    for q in 0..nq {
        for m in 0..heads {
            let orow = &mut out[q * c + m * hd..q * c + (m + 1) * hd];
            for l in 0..levels {
                let (h, w) = level_hw[l];
                let vd = vals[l].data();
                for k in 0..points {
                    let si = (m * levels + l) * points + k;
                    let a = att.data()[q * s + si];
                    let t = make_tap(loc.data()[q * 2 * s + 2 * si], loc.data()[q * 2 * s + 2 * si + 1], h, w);
                    for (&pix, &wt) in t.idx.iter().zip(&t.wts) {
                        let coef = a * wt;
                        if coef == 0.0 {
                            continue;
                        }
                        let vrow = &vd[pix * c + m * hd..pix * c + (m + 1) * hd];
                        for (o, v) in orow.iter_mut().zip(vrow) {
                            *o += coef * v;
                        }
                    }
                    taps.push(t);
                }
            }
        }
    }

    let mut parents: Vec<Var<'t>> = values.to_vec();
    parents.push(locations);
    parents.push(weights);
    let sizes: Vec<usize> = vals.iter().map(|v| v.len()).collect();
    Ok(locations.tape().record(
        Tensor::from_parts(vec![nq, c], out),
        &parents,
        Box::new(move |g, need| {
            let want_loc = need[levels];
            let want_att = need[levels + 1];
            let mut gvals: Vec<Option<Vec<f64>>> = (0..levels).map(|l| need[l].then(|| vec![0.0; sizes[l]])).collect();
            let mut gloc = want_loc.then(|| vec![0.0; nq * 2 * s]);
            let mut gatt = want_att.then(|| vec![0.0; nq * s]);
            let mut ti = 0;
            for q in 0..nq {
                for m in 0..heads {
                    let grow = &g[q * c + m * hd..q * c + (m + 1) * hd];
                    for l in 0..levels {
                        let vd = vals[l].data();
                        for k in 0..points {
                            let si = (m * levels + l) * points + k;
                            let a = att.data()[q * s + si];
                            let t = &taps[ti];
                            ti += 1;
                            let (mut ga, mut gx, mut gy) = (0.0, 0.0, 0.0);
                            for corner in 0..4 {
                                let pix = t.idx[corner];
                                let vrow = &vd[pix * c + m * hd..pix * c + (m + 1) * hd];
                                let dot: f64 = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                                ga += t.wts[corner] * dot;
                                gx += t.dx[corner] * dot;
                                gy += t.dy[corner] * dot;
                                if let Some(gv) = gvals[l].as_mut() {
                                    let coef = a * t.wts[corner];
                                    if coef != 0.0 {
                                        let dst = &mut gv[pix * c + m * hd..pix * c + (m + 1) * hd];
                                        for (o, gg) in dst.iter_mut().zip(grow) {
                                            *o += coef * gg;
                                        }
                                    }
                                }
                            }
                            if let Some(ga_buf) = gatt.as_mut() {
                                ga_buf[q * s + si] = ga;
                            }
                            if let Some(gl) = gloc.as_mut() {
                                gl[q * 2 * s + 2 * si] = a * gx;
                                gl[q * 2 * s + 2 * si + 1] = a * gy;
                            }
                        }
                    }
                }
            }
            let mut res = gvals;
            res.push(gloc);
            res.push(gatt);
            res
        }),
    ))
}

/// Multi-scale deformable attention for a batch of queries.
///
/// * `queries`: `[Nq × C]` query features `z_q` (positional encoding included).
/// * `references[q][l]`: reference point of query `q` in level `l`'s index grid.
/// * `levels`: `[H_l × W_l × C]` feature maps.
pub fn deform_attn_batch<'t>(
    queries: Var<'t>,
    references: &[Vec<(f64, f64)>],
    levels: &[Var<'t>],
    attn: &AttnVars<'t>,
) -> Result<Var<'t>> {
    let cfg = attn.config;
    cfg.validate()?;
    if levels.len() != cfg.levels {
        return Err(Error::shape(format!(
            "pyramid has {} levels, attention expects {}",
            levels.len(),
            cfg.levels
        )));
    }
    let qshape = queries.shape();
    if qshape.len() != 2 || qshape[1] != cfg.channels {
        return Err(Error::shape(format!(
            "queries {qshape:?} do not have {} channels",
            cfg.channels
        )));
    }
    let nq = qshape[0];
    if references.len() != nq || references.iter().any(|r| r.len() != cfg.levels) {
        return Err(Error::shape("one reference point per query and level is required"));
    }
    let mut values = Vec::with_capacity(cfg.levels);
    let mut hw = Vec::with_capacity(cfg.levels);
    for lv in levels {
        let s = lv.shape();
        let [h, w, ch] = s[..] else {
            return Err(Error::shape(format!("level must be H×W×C, got {s:?}")));
        };
        if ch != cfg.channels {
            return Err(Error::shape(format!(
                "level has {ch} channels, attention expects {}",
                cfg.channels
            )));
        }
        values.push(lv.reshape(&[h * w, ch])?.matmul(attn.value_proj)?);
        hw.push((h, w));
    }

    let s = cfg.samples();
    let offsets = linear(queries, attn.offset_w, attn.offset_b)?;
    let mut base = vec![0.0; nq * 2 * s];
    for (q, refs) in references.iter().enumerate() {
        for m in 0..cfg.heads {
            for (l, &(rx, ry)) in refs.iter().enumerate() {
                for k in 0..cfg.points {
                    let si = (m * cfg.levels + l) * cfg.points + k;
                    base[q * 2 * s + 2 * si] = rx;
                    base[q * 2 * s + 2 * si + 1] = ry;
                }
            }
        }
    }
    let locations = offsets.add(queries.tape().constant(Tensor::from_parts(vec![nq, 2 * s], base)))?;
    let weights = linear(queries, attn.attn_w, attn.attn_b)?
        .reshape(&[nq * cfg.heads, cfg.levels * cfg.points])?
        .softmax_last(1.0)?
        .reshape(&[nq, s])?;
    let heads = sample_and_weight(&values, &hw, locations, weights, cfg)?;
    heads.matmul(attn.output_proj)
}

fn check_query(z_q: &Tensor, cfg: &DeformAttnConfig) -> Result<()> {
    if z_q.len() != cfg.channels {
        return Err(Error::shape(format!(
            "query has {} channels, attention expects {}",
            z_q.len(),
            cfg.channels
        )));
    }
    Ok(())
}

/// Single-scale deformable attention of one query at `p_q` (index coordinates
/// of `x`). `params.config.levels` must be 1.
pub fn deform_attn_single(z_q: &Tensor, p_q: (f64, f64), x: &Tensor, params: &DeformAttnParams) -> Result<Tensor> {
    params.check_shapes()?;
    if params.config.levels != 1 {
        return Err(Error::invalid("single-scale attention needs exactly one level"));
    }
    check_query(z_q, &params.config)?;
    let tape = Tape::new();
    let a = params.bind(&tape, false);
    let q = tape.constant(z_q.reshape(&[1, z_q.len()])?);
    let lv = tape.constant(x.clone());
    let out = deform_attn_batch(q, &[vec![p_q]], &[lv], &a)?;
    let v = out.value();
    v.reshape(&[v.len()])
}

/// Multi-scale deformable attention of one query at normalized `p_hat`.
pub fn deform_attn_multiscale(
    z_q: &Tensor,
    p_hat: (f64, f64),
    pyramid: &FeaturePyramid,
    params: &DeformAttnParams,
) -> Result<Tensor> {
    params.check_shapes()?;
    if pyramid.levels.len() != params.config.levels {
        return Err(Error::shape(format!(
            "pyramid has {} levels, attention expects {}",
            pyramid.levels.len(),
            params.config.levels
        )));
    }
    if !(0.0..=1.0).contains(&p_hat.0) || !(0.0..=1.0).contains(&p_hat.1) {
        return Err(Error::invalid(format!("normalized point {p_hat:?} outside [0,1]²")));
    }
    check_query(z_q, &params.config)?;
    let tape = Tape::new();
    let a = params.bind(&tape, false);
    let q = tape.constant(z_q.reshape(&[1, z_q.len()])?);
    let levels: Vec<_> = pyramid.levels.iter().map(|l| tape.constant(l.clone())).collect();
    let refs = pyramid
        .levels
        .iter()
        .map(|l| normalized_to_level(p_hat, l.shape()[0], l.shape()[1]))
        .collect();
    let out = deform_attn_batch(q, &[refs], &levels, &a)?;
    let v = out.value();
    v.reshape(&[v.len()])
}

/// Multi-level feature maps with positional embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    /// `[H_l × W_l × C]` per level, finest first.
    pub levels: Vec<Tensor>,
    /// Scale of each level relative to the input image (1/4, 1/8, ...).
    pub scales: Vec<f64>,
    /// `[H_l × W_l × C]` positional embedding added to queries of level `l`.
    pub pos: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Level `l+1` extents must be the ceiling half of level `l`'s.
    pub fn new(levels: Vec<Tensor>, scales: Vec<f64>, pos: Vec<Tensor>) -> Result<Self> {
        if levels.is_empty() || levels.len() != scales.len() || levels.len() != pos.len() {
            return Err(Error::shape("levels, scales and embeddings must align"));
        }
        for (l, p) in levels.iter().zip(&pos) {
            if l.rank() != 3 || l.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "level {:?} and embedding {:?} must be equal H×W×C",
                    l.shape(),
                    p.shape()
                )));
            }
        }
        for pair in levels.windows(2) {
            let (a, b) = (pair[0].shape(), pair[1].shape());
            if b[0] != a[0].div_ceil(2) || b[1] != a[1].div_ceil(2) {
                return Err(Error::shape(format!(
                    "level {:?} is not the ceiling half of {:?}",
                    b, a
                )));
            }
        }
        Ok(Self { levels, scales, pos })
    }

    /// Pyramid with sinusoidal embeddings and no learned offsets.
    pub fn with_sine_embedding(levels: Vec<Tensor>, scales: Vec<f64>) -> Result<Self> {
        let pos = levels
            .iter()
            .map(|l| sine_embedding(l.shape()[0], l.shape()[1], l.shape()[2]))
            .collect();
        Self::new(levels, scales, pos)
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[2]
    }
}

/// Fixed 2-D sinusoidal embedding: the first half of the channels encodes `y`,
/// the second half `x`, each as interleaved sin/cos of the normalized
/// coordinate scaled by `2π` over geometric frequencies.
pub fn sine_embedding(h: usize, w: usize, c: usize) -> Tensor {
    let half = c / 2;
    let mut out = vec![0.0; h * w * c];
    let freq = |i: usize, n: usize| 10000f64.powf((2 * (i / 2)) as f64 / n.max(1) as f64);
    for j in 0..h {
        for i in 0..w {
            let (nx, ny) = pixel_center_normalized(i, j, h, w);
            let base = (j * w + i) * c;
            for ch in 0..c {
                let (coord, k, n) = if ch < half {
                    (ny, ch, half)
                } else {
                    (nx, ch - half, c - half)
                };
                let arg = 2.0 * PI * coord / freq(k, n);
                out[base + ch] = if k % 2 == 0 { arg.sin() } else { arg.cos() };
            }
        }
    }
    Tensor::from_parts(vec![h, w, c], out)
}

/// Weights of one encoder layer: attention plus a two-layer feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub attn: DeformAttnParams,
    /// `[C × 2C]`, `[2C]`, `[2C × C]`, `[C]`.
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

impl EncoderLayerParams {
    pub fn init<R: Rng + ?Sized>(config: DeformAttnConfig, rng: &mut R) -> Result<Self> {
        let c = config.channels;
        Ok(Self {
            attn: DeformAttnParams::init(config, rng)?,
            ffn_w1: init_linear(c, 2 * c, rng),
            ffn_b1: Tensor::zeros(&[2 * c]),
            ffn_w2: init_linear(2 * c, c, rng).map(|v| v * 0.5),
            ffn_b2: Tensor::zeros(&[c]),
        })
    }

    pub fn write_to(&self, store: &mut ParamStore, prefix: &str) {
        self.attn.write_to(store, &format!("{prefix}.attn"));
        store.insert(format!("{prefix}.ffn_w1"), self.ffn_w1.clone());
        store.insert(format!("{prefix}.ffn_b1"), self.ffn_b1.clone());
        store.insert(format!("{prefix}.ffn_w2"), self.ffn_w2.clone());
        store.insert(format!("{prefix}.ffn_b2"), self.ffn_b2.clone());
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> EncoderLayerVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.var(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        EncoderLayerVars {
            attn: self.attn.bind(tape, trainable),
            ffn_w1: leaf(&self.ffn_w1),
            ffn_b1: leaf(&self.ffn_b1),
            ffn_w2: leaf(&self.ffn_w2),
            ffn_b2: leaf(&self.ffn_b2),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerVars<'t> {
    pub attn: AttnVars<'t>,
    pub ffn_w1: Var<'t>,
    pub ffn_b1: Var<'t>,
    pub ffn_w2: Var<'t>,
    pub ffn_b2: Var<'t>,
}

impl<'t> EncoderLayerVars<'t> {
    pub fn from_bound(bound: &Bound<'t>, prefix: &str, config: DeformAttnConfig) -> Result<Self> {
        Ok(Self {
            attn: AttnVars::from_bound(bound, &format!("{prefix}.attn"), config)?,
            ffn_w1: bound.get(&format!("{prefix}.ffn_w1"))?,
            ffn_b1: bound.get(&format!("{prefix}.ffn_b1"))?,
            ffn_w2: bound.get(&format!("{prefix}.ffn_w2"))?,
            ffn_b2: bound.get(&format!("{prefix}.ffn_b2"))?,
        })
    }
}

/// Encoder over tape values. Every pixel of every level is a query whose
/// reference point is its own pixel centre. Each layer applies attention with
/// a residual add, then a pointwise feed-forward with a residual add.
pub fn encoder_forward_vars<'t>(
    levels: &[Var<'t>],
    pos: &[Var<'t>],
    layers: &[EncoderLayerVars<'t>],
) -> Result<Vec<Var<'t>>> {
    if levels.len() != pos.len() {
        return Err(Error::shape("one positional embedding per level is required"));
    }
    let shapes: Vec<Vec<usize>> = levels.iter().map(|l| l.shape()).collect();
    for s in &shapes {
        if s.len() != 3 {
            return Err(Error::shape(format!("level must be H×W×C, got {s:?}")));
        }
    }
    let c = shapes[0][2];
    let counts: Vec<usize> = shapes.iter().map(|s| s[0] * s[1]).collect();
    let nq: usize = counts.iter().sum();

    let mut references = Vec::with_capacity(nq);
    for s in &shapes {
        for j in 0..s[0] {
            for i in 0..s[1] {
                let p_hat = pixel_center_normalized(i, j, s[0], s[1]);
                references.push(
                    shapes
                        .iter()
                        .map(|t| normalized_to_level(p_hat, t[0], t[1]))
                        .collect::<Vec<_>>(),
                );
            }
        }
    }
    let flat_pos = Var::concat_first(
        &pos.iter()
            .zip(&counts)
            .map(|(p, &n)| p.reshape(&[n, c]))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let mut current: Vec<Var<'t>> = levels.to_vec();
    for (li, layer) in layers.iter().enumerate() {
        let flat = Var::concat_first(
            &current
                .iter()
                .zip(&counts)
                .map(|(l, &n)| l.reshape(&[n, c]))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let queries = flat.add(flat_pos)?;
        let attended = deform_attn_batch(queries, &references, &current, &layer.attn)?;
        let x = flat.add(attended)?;
        let hidden = linear(x, layer.ffn_w1, layer.ffn_b1)?.silu();
        let x = x.add(linear(hidden, layer.ffn_w2, layer.ffn_b2)?)?;
        if !x.value().all_finite() {
            return Err(Error::NonFinite(format!("encoder activation at layer {li}")));
        }
        let mut next = Vec::with_capacity(current.len());
        let mut start = 0;
        for (s, &n) in shapes.iter().zip(&counts) {
            let rows: Vec<usize> = (start..start + n).collect();
            next.push(x.gather_rows(&rows)?.reshape(s)?);
            start += n;
        }
        current = next;
    }
    Ok(current)
}

/// Runs the encoder stack on a pyramid; output extents equal input extents.
pub fn encoder_forward(pyramid: &FeaturePyramid, layers: &[EncoderLayerParams]) -> Result<FeaturePyramid> {
    let tape = Tape::new();
    let levels: Vec<_> = pyramid.levels.iter().map(|l| tape.constant(l.clone())).collect();
    let pos: Vec<_> = pyramid.pos.iter().map(|p| tape.constant(p.clone())).collect();
    let vars: Vec<_> = layers.iter().map(|l| l.bind(&tape, false)).collect();
    let out = encoder_forward_vars(&levels, &pos, &vars)?;
    Ok(FeaturePyramid {
        levels: out.iter().map(|v| (*v.value()).clone()).collect(),
        scales: pyramid.scales.clone(),
        pos: pyramid.pos.clone(),
    })
}

/// Upsamples every level to `out_h × out_w` and sums them.
pub fn fuse_pyramid_vars<'t>(levels: &[Var<'t>], out_h: usize, out_w: usize) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for l in levels {
        let up = l.resize_bilinear(out_h, out_w)?;
        acc = Some(match acc {
            Some(a) => a.add(up)?,
            None => up,
        });
    }
    acc.ok_or_else(|| Error::invalid("cannot fuse an empty pyramid"))
}

/// Dense descriptor map at `1/patch` of an `image_h × image_w` input.
pub fn fuse_pyramid(pyramid: &FeaturePyramid, image_h: usize, image_w: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || !image_h.is_multiple_of(patch) || !image_w.is_multiple_of(patch) {
        return Err(Error::shape(format!(
            "{image_h}×{image_w} is not divisible by patch size {patch}"
        )));
    }
    let tape = Tape::new();
    let levels: Vec<_> = pyramid.levels.iter().map(|l| tape.constant(l.clone())).collect();
    let fused = fuse_pyramid_vars(&levels, image_h / patch, image_w / patch)?;
    Ok((*fused.value()).clone())
}
