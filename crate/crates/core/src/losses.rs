//! Training objectives: focal matching, matchability, reprojection,
//! reliability and dispersity-peaky losses, all recorded on the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoint::{window_grid, window_softmax};
use crate::numeric::{Tensor, Var};

/// Probability floor used wherever a logarithm is taken.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub t_rel: f64,
    pub t_det: f64,
    /// Peaky-loss window size `N`.
    pub window: usize,
    pub p_norm: f64,
    /// Reprojection matching radius in pixels.
    pub match_radius: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            t_rel: 1.0,
            t_det: 0.1,
            window: 5,
            p_norm: 2.0,
            match_radius: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be ≥ 0, got {}", self.gamma)));
        }
        if !(self.t_rel > 0.0 && self.t_det > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::invalid(format!("window must be odd, got {}", self.window)));
        }
        if !(self.p_norm >= 1.0) {
            return Err(Error::invalid(format!("norm order must be ≥ 1, got {}", self.p_norm)));
        }
        if !(self.match_radius > 0.0) {
            return Err(Error::invalid("match radius must be positive"));
        }
        Ok(())
    }
}

/// Side information reported alongside a loss value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossFlag {
    Clean,
    /// Entries were clamped away from 0 (or 1) before taking logarithms.
    Clamped(usize),
    /// Nothing to average over; the value is 0.
    Empty,
    /// Keypoints whose window overran the border were left out.
    SkippedBorder(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerm<'t> {
    pub value: Var<'t>,
    pub flag: LossFlag,
}

impl<'t> LossTerm<'t> {
    fn empty(tape: &'t crate::numeric::Tape) -> Self {
        Self {
            value: tape.scalar(0.0),
            flag: LossFlag::Empty,
        }
    }
}

/// Mean of `−α (1 − P)^γ log P` over the diagonal match probabilities.
pub fn focal_loss<'t>(p_diag: Var<'t>, alpha: f64, gamma: f64) -> Result<LossTerm<'t>> {
    if p_diag.is_empty() {
        return Ok(LossTerm::empty(p_diag.tape()));
    }
    let v = p_diag.value();
    if !v.all_finite() {
        return Err(Error::NonFinite("match probabilities".into()));
    }
    let clamped = v.data().iter().filter(|&&p| p < PROB_FLOOR).count();
    let p = p_diag.clamp(PROB_FLOOR, 1.0);
    let weight = p.neg().add_scalar(1.0).powf(gamma);
    let value = weight.mul(p.ln().neg())?.mean()?.scale(alpha);
    Ok(LossTerm {
        value,
        flag: if clamped > 0 {
            LossFlag::Clamped(clamped)
        } else {
            LossFlag::Clean
        },
    })
}

/// Focal-weighted binary cross-entropy between a matchability map and its
/// binary target: per cell `α (1 − λ)^γ · BCE` with `λ = exp(−BCE)`, averaged.
pub fn matchability_loss<'t>(m: Var<'t>, target: &Tensor, alpha: f64, gamma: f64) -> Result<LossTerm<'t>> {
    let v = m.value();
    if v.shape() != target.shape() {
        return Err(Error::shape(format!(
            "matchability {:?} and target {:?} differ",
            v.shape(),
            target.shape()
        )));
    }
    if v.is_empty() {
        return Ok(LossTerm::empty(m.tape()));
    }
    if !v.all_finite() {
        return Err(Error::NonFinite("matchability map".into()));
    }
    let clamped = v
        .data()
        .iter()
        .filter(|&&x| !(PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&x))
        .count();
    let tape = m.tape();
    let mc = m.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let g = tape.constant(target.clone());
    let not_g = tape.constant(target.map(|t| 1.0 - t));
    let bce = g.mul(mc.ln())?.add(not_g.mul(mc.neg().add_scalar(1.0).ln())?)?.neg();
    let lambda = bce.neg().exp();
    let value = lambda.neg().add_scalar(1.0).powf(gamma).mul(bce)?.mean()?.scale(alpha);
    Ok(LossTerm {
        value,
        flag: if clamped > 0 {
            LossFlag::Clamped(clamped)
        } else {
            LossFlag::Clean
        },
    })
}

/// Binary target on the `h × w` patch grid: a cell is positive when any of
/// `points` falls inside it.
pub fn matchability_target(points: &[(f64, f64)], h: usize, w: usize, patch: usize) -> Tensor {
    let mut t = Tensor::zeros(&[h, w]);
    let k = patch as f64;
    for &(x, y) in points {
        let (cx, cy) = ((x / k).floor(), (y / k).floor());
        if cx >= 0.0 && cy >= 0.0 && (cx as usize) < w && (cy as usize) < h {
            t.data_mut()[cy as usize * w + cx as usize] = 1.0;
        }
    }
    t
}

/// Pairing of a warped source keypoint with its nearest target keypoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpMatch {
    pub src: usize,
    pub dst: usize,
    pub warped: (f64, f64),
}

/// For each validly warped source point, the nearest target strictly within
/// `radius`; ties go to the smaller target index.
pub fn match_warped(warped: &[Option<(f64, f64)>], targets: &[(f64, f64)], radius: f64) -> Vec<WarpMatch> {
    warped
        .iter()
        .enumerate()
        .filter_map(|(src, w)| {
            let w = (*w)?;
            let mut best: Option<(usize, f64)> = None;
            for (dst, t) in targets.iter().enumerate() {
                let d = (t.0 - w.0).hypot(t.1 - w.1);
                if d < radius && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((dst, d));
                }
            }
            best.map(|(dst, _)| WarpMatch { src, dst, warped: w })
        })
        .collect()
}

fn points_of(v: &Tensor) -> Vec<(f64, f64)> {
    v.data().chunks_exact(2).map(|p| (p[0], p[1])).collect()
}

fn mean_distance<'t>(targets: Var<'t>, matches: &[WarpMatch]) -> Result<Var<'t>> {
    let rows: Vec<usize> = matches.iter().map(|m| m.dst).collect();
    let anchor: Vec<f64> = matches.iter().flat_map(|m| [m.warped.0, m.warped.1]).collect();
    let anchor = targets.tape().constant(Tensor::new(&[matches.len(), 2], anchor)?);
    targets.gather_rows(&rows)?.sub(anchor)?.pnorm_rows(2.0)?.mean()
}

/// Symmetric mean distance between warped keypoints and their nearest
/// counterparts within `radius`.
///
/// `warped12[i]` is keypoint `i` of image 1 mapped into image 2 (`None` when
/// the warp is invalid), and likewise for `warped21`. Warped positions are
/// constants; the gradient reaches the matched target keypoints. When only one
/// direction has matches its mean is returned alone.
pub fn reprojection_loss<'t>(
    kps1: Var<'t>,
    kps2: Var<'t>,
    warped12: &[Option<(f64, f64)>],
    warped21: &[Option<(f64, f64)>],
    radius: f64,
) -> Result<LossTerm<'t>> {
    let (p1, p2) = (points_of(&kps1.value()), points_of(&kps2.value()));
    if warped12.len() != p1.len() || warped21.len() != p2.len() {
        return Err(Error::shape("warped lists must match the keypoint counts"));
    }
    let m12 = match_warped(warped12, &p2, radius);
    let m21 = match_warped(warped21, &p1, radius);
    let mut parts = Vec::new();
    if !m12.is_empty() {
        parts.push(mean_distance(kps2, &m12)?);
    }
    if !m21.is_empty() {
        parts.push(mean_distance(kps1, &m21)?);
    }
    let value = match parts[..] {
        [] => return Ok(LossTerm::empty(kps1.tape())),
        [a] => a,
        [a, b] => a.add(b)?.scale(0.5),
        _ => unreachable!(),
    };
    Ok(LossTerm {
        value,
        flag: LossFlag::Clean,
    })
}

/// `R = exp((P − 1) / t_rel)`.
pub fn reliability_map<'t>(p: Var<'t>, t_rel: f64) -> Result<Var<'t>> {
    if !(t_rel > 0.0) {
        return Err(Error::invalid(format!("t_rel must be positive, got {t_rel}")));
    }
    Ok(p.add_scalar(-1.0).scale(1.0 / t_rel).exp())
}

/// One direction of the reliability loss: for every valid keypoint its score,
/// the score at its warped location, and the reliability sampled for its
/// match. All three are `[n]`.
#[derive(Clone, Copy, Debug)]
pub struct ReliabilitySide<'t> {
    pub scores: Var<'t>,
    pub warped_scores: Var<'t>,
    pub reliability: Var<'t>,
}

fn reliability_side<'t>(side: &ReliabilitySide<'t>) -> Result<Var<'t>> {
    let w = side.scores.mul(side.warped_scores)?;
    let miss = side.reliability.neg().add_scalar(1.0);
    if w.value().data().iter().sum::<f64>() > 0.0 {
        w.mul(miss)?.sum().div(w.sum())
    } else {
        miss.mean()
    }
}

/// Score-weighted mean of `1 − r`, with weights `s · s_warped` normalised to
/// sum to one, averaged over the non-empty directions.
pub fn reliability_loss<'t>(one: ReliabilitySide<'t>, two: ReliabilitySide<'t>) -> Result<LossTerm<'t>> {
    let mut parts = Vec::new();
    for side in [&one, &two] {
        let n = side.scores.len();
        if side.warped_scores.len() != n || side.reliability.len() != n {
            return Err(Error::shape("reliability inputs differ in length"));
        }
        if n > 0 {
            parts.push(reliability_side(side)?);
        }
    }
    let value = match parts[..] {
        [] => return Ok(LossTerm::empty(one.scores.tape())),
        [a] => a,
        [a, b] => a.add(b)?.scale(0.5),
        _ => unreachable!(),
    };
    Ok(LossTerm {
        value,
        flag: LossFlag::Clean,
    })
}

/// Dispersity-peaky loss: per keypoint `(1/N²) Σ d(i,j) s'(i,j)` with `d` the
/// `p`-norm distance of each window cell to the soft location, averaged over
/// keypoints whose window fits inside the map.
pub fn peaky_loss<'t>(
    score: Var<'t>,
    pixels: &[(usize, usize)],
    n: usize,
    t_det: f64,
    p_norm: f64,
) -> Result<LossTerm<'t>> {
    let s = score.shape();
    let [h, w] = s[..] else {
        return Err(Error::shape(format!("score map must be H×W, got {s:?}")));
    };
    if n.is_multiple_of(2) {
        return Err(Error::invalid(format!("window size must be odd, got {n}")));
    }
    let r = n / 2;
    let inside: Vec<(usize, usize)> = pixels
        .iter()
        .copied()
        .filter(|&(i, j)| i >= r && j >= r && i + r < w && j + r < h)
        .collect();
    let skipped = pixels.len() - inside.len();
    if inside.is_empty() {
        return Ok(LossTerm::empty(score.tape()));
    }
    let tape = score.tape();
    let cells = n * n;
    let probs = window_softmax(score, &inside, n, t_det)?;
    let grid = window_grid(n);
    let soft = probs.matmul(tape.constant(grid.clone()))?;
    let spread: Vec<usize> = (0..inside.len()).flat_map(|k| std::iter::repeat_n(k, cells)).collect();
    let tiled = Tensor::new(
        &[inside.len() * cells, 2],
        grid.data()
            .iter()
            .copied()
            .cycle()
            .take(inside.len() * cells * 2)
            .collect(),
    )?;
    let dist = tape
        .constant(tiled)
        .sub(soft.gather_rows(&spread)?)?
        .pnorm_rows(p_norm)?
        .reshape(&[inside.len(), cells])?;
    let value = dist.mul(probs)?.sum().scale(1.0 / (cells * inside.len()) as f64);
    Ok(LossTerm {
        value,
        flag: if skipped > 0 {
            LossFlag::SkippedBorder(skipped)
        } else {
            LossFlag::Clean
        },
    })
}
