//! Two-stage toy training: the descriptor branch on `L_focal + L_matchability`,
//! then the keypoint branch on `L_reprojection + L_reliability + L_peaky` with
//! the descriptor branch frozen.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::{describe, describe_vars, sample_descriptors_vars};
use crate::error::{Error, Result};
use crate::geometry::{
    gt_correspondences, synth_scene, warp_points, Direction, GroundTruthMatches, ScenePair, SceneParams,
};
use crate::keypoint::{dkd_refine_vars, nms_local_max, score_map_vars, ScoreMap};
use crate::losses::{
    focal_loss, match_warped, matchability_loss, matchability_target, peaky_loss, reliability_loss, reliability_map,
    reprojection_loss, LossWeights, ReliabilitySide,
};
use crate::matcher::{dual_softmax_vars, score_matrix_vars};
use crate::model::Weights;
use crate::numeric::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Pairs per step; 0 uses every pair.
    pub batch: usize,
    /// Ground-truth rows sampled per pair and step for the focal loss.
    pub matches_per_pair: usize,
    pub tau: f64,
    /// Detected keypoints per image during keypoint training; as many random
    /// non-maximum positions are added.
    pub top_k: usize,
    pub nms_threshold: f64,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.1,
            clip_norm: 1.0,
            batch: 0,
            matches_per_pair: 64,
            tau: 0.1,
            top_k: 64,
            nms_threshold: 0.0,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for the keypoint stage, which tolerates a larger step.
    pub fn keypoint_stage() -> Self {
        Self {
            lr: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr >= 0.0) || !(self.clip_norm > 0.0) || !(self.tau > 0.0) {
            return Err(Error::invalid("lr must be ≥ 0; clip norm and tau must be positive"));
        }
        if self.matches_per_pair < 2 || self.top_k == 0 {
            return Err(Error::invalid("need at least 2 matches per pair and top_k ≥ 1"));
        }
        Ok(())
    }
}

/// A scene with the ground-truth matches that supervise it.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub scene: ScenePair,
    pub gt: GroundTruthMatches,
}

impl TrainingPair {
    /// Collects up to `count` ground-truth rows from the scene.
    pub fn new(scene: ScenePair, count: usize) -> Self {
        let gt = gt_correspondences(&scene, count, scene.seed);
        Self { scene, gt }
    }
}

/// `count` generated training pairs with `gt_count` ground-truth rows each.
/// Scene seeds come from their own stream of `seed`, so they never coincide
/// with evaluation scenes numbered `seed + i`.
pub fn training_pairs(seed: u64, count: usize, params: &SceneParams, gt_count: usize) -> Result<Vec<TrainingPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    (0..count)
        .map(|_| Ok(TrainingPair::new(synth_scene(rng.random(), params)?, gt_count)))
        .collect()
}

/// Per-step loss values: column 0 is the total, the rest are components.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl LossCurve {
    fn new(components: &[&str]) -> Self {
        let mut columns = vec!["loss_total".to_string()];
        columns.extend(components.iter().map(|c| format!("loss_{c}")));
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|(_, v)| v[0]).collect()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|(_, v)| v[c]).collect())
    }

    /// `step,loss_total,loss_…` with shortest round-trip number formatting.
    pub fn to_csv(&self) -> String {
        let mut s = format!("step,{}\n", self.columns.join(","));
        for (step, vals) in &self.rows {
            let _ = write!(s, "{step}");
            for v in vals {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Parses the output of [`to_csv`](Self::to_csv).
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |r: &str| Error::invalid(format!("malformed loss curve: {r}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("step") {
            return Err(bad("header must start with step"));
        }
        let columns: Vec<String> = cols.map(str::to_string).collect();
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let mut f = line.split(',');
            let step = f.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))?;
            let vals = f
                .map(|v| v.parse::<f64>().map_err(|_| bad(line)))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != columns.len() {
                return Err(bad(line));
            }
            rows.push((step, vals));
        }
        Ok(Self { columns, rows })
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn batch_of(n: usize, batch: usize, step: usize) -> Vec<usize> {
    if batch == 0 || batch >= n {
        (0..n).collect()
    } else {
        (0..batch).map(|b| (step * batch + b) % n).collect()
    }
}

fn check_pairs(pairs: &[TrainingPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::invalid("training needs at least one pair"));
    }
    if let Some(p) = pairs.iter().find(|p| p.gt.rows.len() < 2) {
        return Err(Error::NotEnoughMatches {
            required: 2,
            got: p.gt.rows.len(),
        });
    }
    Ok(())
}

fn accumulate(total: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>, scale: f64) {
    for (k, g) in grads {
        match total.get_mut(&k) {
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * v;
                }
            }
            None => {
                total.insert(k, g.map(|v| v * scale));
            }
        }
    }
}

fn check_finite(step: usize, vals: &[f64]) -> Result<()> {
    match vals.iter().find(|v| !v.is_finite()) {
        Some(&loss) => Err(Error::Diverged { step, loss }),
        None => Ok(()),
    }
}

/// `L_focal + L_matchability` for one pair, with the `[focal, matchability]`
/// components.
fn descriptor_pair_loss<'t>(
    tape: &'t Tape,
    bound: &crate::params::Bound<'t>,
    weights: &Weights,
    pair: &TrainingPair,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'t>, [f64; 2])> {
    let dcfg = &weights.config.descriptor;
    let k = dcfg.patch;
    let rows = &pair.gt.rows;
    let n = cfg.matches_per_pair.min(rows.len());
    let picked: Vec<[f64; 4]> = sample(rng, rows.len(), n).iter().map(|i| rows[i]).collect();
    let p1: Vec<(f64, f64)> = picked.iter().map(|r| (r[0], r[1])).collect();
    let p2: Vec<(f64, f64)> = picked.iter().map(|r| (r[2], r[3])).collect();

    let (d1, m1) = describe_vars(tape.constant(pair.scene.image1.clone()), bound, dcfg)?;
    let (d2, m2) = describe_vars(tape.constant(pair.scene.image2.clone()), bound, dcfg)?;
    let s = score_matrix_vars(
        sample_descriptors_vars(d1, &p1, k)?,
        sample_descriptors_vars(d2, &p2, k)?,
        cfg.tau,
    )?;
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let p_diag = dual_softmax_vars(s)?.reshape(&[n * n])?.gather(&diag)?;
    let focal = focal_loss(p_diag, cfg.loss.alpha, cfg.loss.gamma)?.value;

    let (gh, gw) = (m1.shape()[0], m1.shape()[1]);
    let all1: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();
    let all2: Vec<(f64, f64)> = rows.iter().map(|r| (r[2], r[3])).collect();
    let t1 = matchability_target(&all1, gh, gw, k);
    let t2 = matchability_target(&all2, gh, gw, k);
    let ml = matchability_loss(m1, &t1, cfg.loss.alpha, cfg.loss.gamma)?
        .value
        .add(matchability_loss(m2, &t2, cfg.loss.alpha, cfg.loss.gamma)?.value)?
        .scale(0.5);
    let fv = focal.item();
    let mv = ml.item();
    Ok((focal.add(ml)?, [fv, mv]))
}

/// Minimises `L_D` over the descriptor parameters by clipped gradient
/// descent. Steps are numbered from `start_step`, so a resumed run continues
/// the same sequence.
pub fn train_descriptor_branch(
    weights: &mut Weights,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    start_step: usize,
) -> Result<LossCurve> {
    cfg.validate()?;
    check_pairs(pairs)?;
    let mut curve = LossCurve::new(&["focal", "matchability"]);
    for step in start_step..start_step + cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let batch = batch_of(pairs.len(), cfg.batch, step);
        let scale = 1.0 / batch.len() as f64;
        let mut grads = BTreeMap::new();
        let mut sums = [0.0; 2];
        for &b in &batch {
            let tape = Tape::new();
            let bound = weights.params.bind(&tape, |n| n.starts_with("desc."));
            let (loss, parts) = descriptor_pair_loss(&tape, &bound, weights, &pairs[b], cfg, &mut rng)?;
            check_finite(step, &[loss.item()])?;
            accumulate(&mut grads, bound.grads(&tape.backward(loss)?), scale);
            sums[0] += parts[0] * scale;
            sums[1] += parts[1] * scale;
        }
        let total = sums[0] + sums[1];
        curve.rows.push((step, vec![total, sums[0], sums[1]]));
        weights.params.sgd_step(&grads, cfg.lr, cfg.clip_norm);
    }
    Ok(curve)
}

/// Keypoint set for one image: top-`k` NMS pixels plus `k` random interior
/// pixels that are not NMS maxima.
fn training_pixels(s: &ScoreMap, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let n = cfg.loss.window;
    let r = n / 2;
    let mut maxima = nms_local_max(s, n, cfg.nms_threshold)?;
    maxima.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.j.cmp(&b.j)).then(a.i.cmp(&b.i)));
    maxima.truncate(cfg.top_k);
    let taken: BTreeSet<(usize, usize)> = maxima.iter().map(|p| (p.i, p.j)).collect();
    let (h, w) = (s.height(), s.width());
    let interior: Vec<(usize, usize)> = (r..h.saturating_sub(r))
        .flat_map(|j| (r..w.saturating_sub(r)).map(move |i| (i, j)))
        .filter(|p| !taken.contains(p))
        .collect();
    let mut out: Vec<(usize, usize)> = maxima.iter().map(|p| (p.i, p.j)).collect();
    let extra = cfg.top_k.min(interior.len());
    out.extend(sample(rng, interior.len(), extra).iter().map(|i| interior[i]));
    Ok(out)
}

fn to_points(v: &Tensor) -> Vec<(f64, f64)> {
    v.data().chunks_exact(2).map(|p| (p[0], p[1])).collect()
}

/// Scores of the `[H × W]` map at continuous image points `[P × 2]`.
fn scores_at<'t>(score: Var<'t>, pts: Var<'t>) -> Result<Var<'t>> {
    let s = score.shape();
    let map = score.reshape(&[s[0], s[1], 1])?;
    let idx = pts.add_scalar(-0.5);
    map.bilinear_sample(idx)?.reshape(&[pts.shape()[0]])
}

fn constant_points<'t>(tape: &'t Tape, pts: &[(f64, f64)]) -> Result<Var<'t>> {
    let flat = pts.iter().flat_map(|p| [p.0, p.1]).collect();
    Ok(tape.constant(Tensor::new(&[pts.len(), 2], flat)?))
}

/// One direction of reliability: valid source keypoints matched to target
/// keypoints, with scores and reliabilities gathered on the tape.
#[allow(clippy::too_many_arguments)]
fn reliability_direction<'t>(
    src_score: Var<'t>,
    dst_score: Var<'t>,
    src_kps: Var<'t>,
    warped: &[Option<(f64, f64)>],
    dst_pts: &[(f64, f64)],
    rel: Var<'t>,
    transpose: bool,
    radius: f64,
) -> Result<ReliabilitySide<'t>> {
    let tape = src_score.tape();
    let matches = match_warped(warped, dst_pts, radius);
    let src: Vec<usize> = matches.iter().map(|m| m.src).collect();
    let wpts: Vec<(f64, f64)> = matches.iter().map(|m| m.warped).collect();
    if matches.is_empty() {
        let empty = tape.constant(Tensor::zeros(&[0]));
        return Ok(ReliabilitySide {
            scores: empty,
            warped_scores: empty,
            reliability: empty,
        });
    }
    let cols = rel.shape()[1];
    let flat: Vec<usize> = matches
        .iter()
        .map(|m| {
            if transpose {
                m.dst * cols + m.src
            } else {
                m.src * cols + m.dst
            }
        })
        .collect();
    let n = rel.len();
    Ok(ReliabilitySide {
        scores: scores_at(src_score, src_kps.gather_rows(&src)?)?,
        warped_scores: scores_at(dst_score, constant_points(tape, &wpts)?)?,
        reliability: rel.reshape(&[n])?.gather(&flat)?,
    })
}

/// `L_reprojection + L_reliability + L_peaky` for one pair, with the three
/// components.
fn keypoint_pair_loss<'t>(
    tape: &'t Tape,
    bound: &crate::params::Bound<'t>,
    weights: &Weights,
    fields: &(Tensor, Tensor),
    pair: &TrainingPair,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'t>, [f64; 3])> {
    let kcfg = &weights.config.keypoint;
    let lw = &cfg.loss;
    let scene = &pair.scene;
    let s1 = score_map_vars(tape.constant(scene.image1.clone()), bound, kcfg)?;
    let s2 = score_map_vars(tape.constant(scene.image2.clone()), bound, kcfg)?;
    let px1 = training_pixels(&ScoreMap::new((*s1.value()).clone())?, cfg, rng)?;
    let px2 = training_pixels(&ScoreMap::new((*s2.value()).clone())?, cfg, rng)?;
    let k1 = dkd_refine_vars(s1, &px1, lw.window, lw.t_det)?;
    let k2 = dkd_refine_vars(s2, &px2, lw.window, lw.t_det)?;
    let (p1, p2) = (to_points(&k1.value()), to_points(&k2.value()));
    let w12 = warp_points(scene, &p1, Direction::OneToTwo);
    let w21 = warp_points(scene, &p2, Direction::TwoToOne);

    let reproj = reprojection_loss(k1, k2, &w12, &w21, lw.match_radius)?.value;

    let patch = weights.config.descriptor.patch;
    let d1 = sample_descriptors_vars(tape.constant(fields.0.clone()), &p1, patch)?;
    let d2 = sample_descriptors_vars(tape.constant(fields.1.clone()), &p2, patch)?;
    let rel = reliability_map(dual_softmax_vars(score_matrix_vars(d1, d2, cfg.tau)?)?, lw.t_rel)?;
    let one = reliability_direction(s1, s2, k1, &w12, &p2, rel, false, lw.match_radius)?;
    let two = reliability_direction(s2, s1, k2, &w21, &p1, rel, true, lw.match_radius)?;
    let reliab = reliability_loss(one, two)?.value;

    let peaky = peaky_loss(s1, &px1, lw.window, lw.t_det, lw.p_norm)?
        .value
        .add(peaky_loss(s2, &px2, lw.window, lw.t_det, lw.p_norm)?.value)?
        .scale(0.5);
    let parts = [reproj.item(), reliab.item(), peaky.item()];
    Ok((reproj.add(reliab)?.add(peaky)?, parts))
}

/// Minimises `L_K` over the keypoint parameters only; descriptor parameters
/// are bound as constants and never receive a gradient.
pub fn train_keypoint_branch(
    weights: &mut Weights,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    start_step: usize,
) -> Result<LossCurve> {
    cfg.validate()?;
    check_pairs(pairs)?;
    let desc = weights.descriptor_params();
    let fields = pairs
        .iter()
        .map(|p| {
            let f1 = describe(&p.scene.image1, &desc, &weights.config.descriptor)?;
            let f2 = describe(&p.scene.image2, &desc, &weights.config.descriptor)?;
            Ok((f1.d, f2.d))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut curve = LossCurve::new(&["reprojection", "reliability", "peaky"]);
    for step in start_step..start_step + cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let batch = batch_of(pairs.len(), cfg.batch, step);
        let scale = 1.0 / batch.len() as f64;
        let mut grads = BTreeMap::new();
        let mut sums = [0.0; 3];
        for &b in &batch {
            let tape = Tape::new();
            let bound = weights.params.bind(&tape, |n| n.starts_with("kp."));
            let (loss, parts) = keypoint_pair_loss(&tape, &bound, weights, &fields[b], &pairs[b], cfg, &mut rng)?;
            check_finite(step, &[loss.item()])?;
            accumulate(&mut grads, bound.grads(&tape.backward(loss)?), scale);
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p * scale;
            }
        }
        let total: f64 = sums.iter().sum();
        curve.rows.push((step, vec![total, sums[0], sums[1], sums[2]]));
        weights.params.sgd_step(&grads, cfg.lr, cfg.clip_norm);
    }
    Ok(curve)
}
