//! Dual-softmax mutual-nearest-neighbour matching and epipolar semi-dense
//! refinement of coarse patch matches.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::descriptor::{describe, sample_descriptors, DescriptorField};
use crate::error::{Error, Result};
use crate::geometry::{eight_point, ransac_fundamental, FundamentalMatrix};
use crate::keypoint::{detect_on_map, score_map, DetectConfig, Keypoint};
use crate::model::Weights;
use crate::numeric::{matmul_raw, softmax, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Sparse,
    Coarse,
    Refined,
}

impl MatchKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Sparse => "sparse",
            Self::Coarse => "coarse",
            Self::Refined => "refined",
        }
    }
}

/// One correspondence in continuous image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub p1: (f64, f64),
    pub p2: (f64, f64),
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    pub kind: MatchKind,
    pub pairs: Vec<Match>,
    /// The semi-dense stage fell back to sparse matches.
    pub degraded: bool,
    /// Pairs removed because the refinement moved them beyond the patch.
    pub dropped_by_filter: usize,
    /// Pairs removed because their epipolar line was undefined.
    pub dropped_degenerate: usize,
}

impl MatchSet {
    pub fn new(kind: MatchKind, pairs: Vec<Match>) -> Self {
        Self {
            kind,
            pairs,
            degraded: false,
            dropped_by_filter: 0,
            dropped_degenerate: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn points1(&self) -> Vec<(f64, f64)> {
        self.pairs.iter().map(|m| m.p1).collect()
    }

    pub fn points2(&self) -> Vec<(f64, f64)> {
        self.pairs.iter().map(|m| m.p2).collect()
    }

    /// `{"kind":…,"pairs":[[x1,y1,x2,y2,conf],…],"degraded":…,"dropped_by_filter":…}`
    /// with six decimals.
    pub fn to_json(&self) -> String {
        let mut s = format!("{{\"kind\":\"{}\",\"pairs\":[", self.kind.as_str());
        for (n, m) in self.pairs.iter().enumerate() {
            if n > 0 {
                s.push(',');
            }
            let _ = write!(
                s,
                "[{:.6},{:.6},{:.6},{:.6},{:.6}]",
                m.p1.0, m.p1.1, m.p2.0, m.p2.1, m.confidence
            );
        }
        let _ = write!(
            s,
            "],\"degraded\":{},\"dropped_by_filter\":{}}}",
            self.degraded, self.dropped_by_filter
        );
        s
    }
}

/// `S(i, j) = ⟨d¹ᵢ, d²ⱼ⟩ / τ`.
pub fn score_matrix(d1: &Tensor, d2: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if d1.rank() != 2 || d2.rank() != 2 || d1.shape()[1] != d2.shape()[1] {
        return Err(Error::shape(format!(
            "descriptor sets {:?} and {:?} must be N×C with equal C",
            d1.shape(),
            d2.shape()
        )));
    }
    let (n1, n2, c) = (d1.shape()[0], d2.shape()[0], d1.shape()[1]);
    let prod = matmul_raw(d1.data(), d2.transpose().data(), n1, c, n2);
    Tensor::new(&[n1, n2], prod.into_iter().map(|v| v / tau).collect())
}

/// Row-softmax times column-softmax of `S`.
pub fn dual_softmax(s: &Tensor) -> Result<Tensor> {
    if s.rank() != 2 {
        return Err(Error::shape(format!("score matrix must be 2-D, got {:?}", s.shape())));
    }
    let (n1, n2) = (s.shape()[0], s.shape()[1]);
    if n1 == 0 || n2 == 0 {
        return Ok(s.clone());
    }
    if !s.all_finite() {
        return Err(Error::NonFinite("score matrix".into()));
    }
    let mut rows = vec![0.0; n1 * n2];
    for i in 0..n1 {
        let r = softmax(&Tensor::new(&[n2], s.row(i).to_vec())?, 1.0)?;
        rows[i * n2..(i + 1) * n2].copy_from_slice(r.data());
    }
    let st = s.transpose();
    let mut out = rows;
    for j in 0..n2 {
        let col = softmax(&Tensor::new(&[n1], st.row(j).to_vec())?, 1.0)?;
        for i in 0..n1 {
            out[i * n2 + j] *= col.data()[i];
        }
    }
    Tensor::new(&[n1, n2], out)
}

/// Tape version of [`score_matrix`].
pub fn score_matrix_vars<'t>(d1: Var<'t>, d2: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(d1.matmul(d2.transpose()?)?.scale(1.0 / tau))
}

/// Tape version of [`dual_softmax`].
pub fn dual_softmax_vars<'t>(s: Var<'t>) -> Result<Var<'t>> {
    let rows = s.softmax_last(1.0)?;
    let cols = s.transpose()?.softmax_last(1.0)?.transpose()?;
    rows.mul(cols)
}

/// Index pair kept by [`mnn_filter`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndexMatch {
    pub i: usize,
    pub j: usize,
    pub p: f64,
}

/// `(i, j)` survives when `P(i, j)` exceeds `threshold` and is the maximum of
/// both its row and its column; ties go to the smaller index.
pub fn mnn_filter(p: &Tensor, threshold: f64) -> Result<Vec<IndexMatch>> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0, 1)")));
    }
    if p.rank() != 2 {
        return Err(Error::shape(format!("probabilities must be 2-D, got {:?}", p.shape())));
    }
    let (n1, n2) = (p.shape()[0], p.shape()[1]);
    let argmax = |vals: &mut dyn Iterator<Item = f64>| {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (k, v) in vals.enumerate() {
            if v > best.1 {
                best = (k, v);
            }
        }
        best.0
    };
    let col_best: Vec<usize> = (0..n2)
        .map(|j| argmax(&mut (0..n1).map(|i| p.data()[i * n2 + j])))
        .collect();
    let mut out = Vec::new();
    for i in 0..n1 {
        if n2 == 0 {
            break;
        }
        let j = argmax(&mut p.row(i).iter().copied());
        let v = p.data()[i * n2 + j];
        if v > threshold && col_best[j] == i {
            out.push(IndexMatch { i, j, p: v });
        }
    }
    Ok(out)
}

/// Centres of the `count` most matchable patches in image coordinates,
/// highest first; ties go to the earlier row-major patch.
pub fn topk_coarse(m: &Tensor, patch: usize, count: usize) -> Result<Vec<(f64, f64)>> {
    if count == 0 {
        return Err(Error::invalid("top-K needs K ≥ 1"));
    }
    if m.rank() != 2 {
        return Err(Error::shape(format!("matchability must be 2-D, got {:?}", m.shape())));
    }
    let w = m.shape()[1];
    let mut idx: Vec<usize> = (0..m.len()).collect();
    idx.sort_by(|&a, &b| m.data()[b].total_cmp(&m.data()[a]).then(a.cmp(&b)));
    idx.truncate(count);
    let k = patch as f64;
    Ok(idx
        .into_iter()
        .map(|e| (((e % w) as f64 + 0.5) * k, ((e / w) as f64 + 0.5) * k))
        .collect())
}

/// Eight-point fundamental matrix from sparse matches.
pub fn estimate_fundamental(m: &MatchSet) -> Result<FundamentalMatrix> {
    eight_point(&m.points1(), &m.points2())
}

/// Robust alternative to [`estimate_fundamental`].
pub fn estimate_fundamental_robust(m: &MatchSet, iters: usize, thresh: f64, seed: u64) -> Result<FundamentalMatrix> {
    ransac_fundamental(&m.points1(), &m.points2(), iters, thresh, seed).map(|r| r.0)
}

/// Unnormalized epipolar lines `(a, b, c) = F·(x, y, 1)` in image 2.
pub fn epipolar_lines(f: &Matrix3<f64>, pts: &[(f64, f64)]) -> Vec<[f64; 3]> {
    pts.iter()
        .map(|p| {
            let l = f * Vector3::new(p.0, p.1, 1.0);
            [l.x, l.y, l.z]
        })
        .collect()
}

/// Offset moving `(x, y)` onto the line `a x + b y + c = 0` along its
/// normal. The line is scaled to a unit normal first so the result does not
/// depend on the scale of `F`, and the offset is computed relative to the
/// point so `eps` shrinks it by a relative `eps` at most. At `eps = 0` this is
/// the closed-form foot of the perpendicular.
pub fn epipolar_offset(line: [f64; 3], x: f64, y: f64, eps: f64) -> Option<(f64, f64)> {
    let [a, b, c] = line;
    let n = a.hypot(b);
    if !n.is_finite() || !c.is_finite() || n == 0.0 || n <= 1e-12 * c.abs() {
        return None;
    }
    let (a, b, c) = (a / n, b / n, c / n);
    let residual = a * x + b * y + c;
    let den = a * a + b * b + eps;
    Some((-a * residual / den, -b * residual / den))
}

/// Keeps each `p¹` and moves `p²` onto the epipolar line of `p¹`, dropping
/// pairs moved further than `patch` pixels along either axis.
pub fn refine_semi_dense(coarse: &MatchSet, f: &Matrix3<f64>, patch: usize, eps: f64) -> Result<MatchSet> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    let lines = epipolar_lines(f, &coarse.points1());
    let limit = patch as f64;
    let mut out = MatchSet::new(MatchKind::Refined, Vec::with_capacity(coarse.len()));
    for (m, line) in coarse.pairs.iter().zip(lines) {
        let Some((dx, dy)) = epipolar_offset(line, m.p2.0, m.p2.1, eps) else {
            out.dropped_degenerate += 1;
            continue;
        };
        if dx.abs().max(dy.abs()) > limit {
            out.dropped_by_filter += 1;
            continue;
        }
        out.pairs.push(Match {
            p1: m.p1,
            p2: (m.p2.0 + dx, m.p2.1 + dy),
            confidence: m.confidence,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub detect: DetectConfig,
    pub tau: f64,
    pub threshold: f64,
    /// Coarse patches taken from each matchability map.
    pub coarse_top_k: usize,
    pub eps: f64,
    /// Estimate the refinement `F` with RANSAC instead of plain eight-point.
    pub robust_f: bool,
    pub ransac_iters: usize,
    pub ransac_thresh: f64,
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            detect: DetectConfig::default(),
            tau: 0.1,
            threshold: 0.01,
            coarse_top_k: 256,
            eps: 1e-9,
            robust_f: false,
            ransac_iters: 500,
            ransac_thresh: 1.0,
            seed: 0,
        }
    }
}

/// Keypoints, their descriptors and the dense field of one image.
#[derive(Clone, Debug)]
pub struct Features {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Tensor,
    pub field: DescriptorField,
    pub extents: (usize, usize),
}

/// Runs both branches on one `H × W × 3` image.
pub fn extract(image: &Tensor, weights: &Weights, cfg: &DetectConfig) -> Result<Features> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("image must be H×W×3, got {s:?}")));
    }
    let extents = (s[0], s[1]);
    let smap = score_map(image, &weights.params, &weights.config.keypoint)?;
    let keypoints = detect_on_map(&smap, cfg)?;
    let field = describe(image, &weights.params, &weights.config.descriptor)?;
    let descriptors = sample_descriptors(&field, &keypoints, extents)?;
    Ok(Features {
        keypoints,
        descriptors,
        field,
        extents,
    })
}

/// Dual-softmax MNN matches between two descriptor sets at given points.
pub fn match_descriptors(
    pts1: &[(f64, f64)],
    d1: &Tensor,
    pts2: &[(f64, f64)],
    d2: &Tensor,
    tau: f64,
    threshold: f64,
    kind: MatchKind,
) -> Result<MatchSet> {
    if pts1.is_empty() || pts2.is_empty() {
        return Ok(MatchSet::new(kind, Vec::new()));
    }
    let p = dual_softmax(&score_matrix(d1, d2, tau)?)?;
    let pairs = mnn_filter(&p, threshold)?
        .into_iter()
        .map(|m| Match {
            p1: pts1[m.i],
            p2: pts2[m.j],
            confidence: m.p,
        })
        .collect();
    Ok(MatchSet::new(kind, pairs))
}

pub fn match_features_sparse(f1: &Features, f2: &Features, cfg: &MatchConfig) -> Result<MatchSet> {
    let pts = |f: &Features| f.keypoints.iter().map(|k| (k.x, k.y)).collect::<Vec<_>>();
    match_descriptors(
        &pts(f1),
        &f1.descriptors,
        &pts(f2),
        &f2.descriptors,
        cfg.tau,
        cfg.threshold,
        MatchKind::Sparse,
    )
}

/// Coarse matches between the most matchable patches of both fields.
pub fn match_coarse(f1: &DescriptorField, f2: &DescriptorField, cfg: &MatchConfig) -> Result<MatchSet> {
    let c1 = topk_coarse(&f1.m, f1.k, cfg.coarse_top_k)?;
    let c2 = topk_coarse(&f2.m, f2.k, cfg.coarse_top_k)?;
    let d1 = crate::descriptor::sample_descriptors_at(f1, &c1)?;
    let d2 = crate::descriptor::sample_descriptors_at(f2, &c2)?;
    match_descriptors(&c1, &d1, &c2, &d2, cfg.tau, cfg.threshold, MatchKind::Coarse)
}

/// Semi-dense matches from sparse matches and both descriptor fields. Falls
/// back to the sparse set (flagged degraded) when `F` cannot be estimated.
pub fn semi_dense_from_sparse(
    sparse: &MatchSet,
    f1: &DescriptorField,
    f2: &DescriptorField,
    cfg: &MatchConfig,
) -> Result<MatchSet> {
    let f = if cfg.robust_f {
        estimate_fundamental_robust(sparse, cfg.ransac_iters, cfg.ransac_thresh, cfg.seed)
    } else {
        estimate_fundamental(sparse)
    };
    let f = match f {
        Ok(f) => f,
        Err(e) if e.is_numeric() || matches!(e, Error::NotEnoughMatches { .. }) => {
            let mut out = sparse.clone();
            out.degraded = true;
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    let coarse = match_coarse(f1, f2, cfg)?;
    refine_semi_dense(&coarse, f.matrix(), f1.k, cfg.eps)
}

pub fn match_sparse(img1: &Tensor, img2: &Tensor, weights: &Weights, cfg: &MatchConfig) -> Result<MatchSet> {
    let f1 = extract(img1, weights, &cfg.detect)?;
    let f2 = extract(img2, weights, &cfg.detect)?;
    match_features_sparse(&f1, &f2, cfg)
}

pub fn match_semi_dense(img1: &Tensor, img2: &Tensor, weights: &Weights, cfg: &MatchConfig) -> Result<MatchSet> {
    let f1 = extract(img1, weights, &cfg.detect)?;
    let f2 = extract(img2, weights, &cfg.detect)?;
    let sparse = match_features_sparse(&f1, &f2, cfg)?;
    semi_dense_from_sparse(&sparse, &f1.field, &f2.field, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_matrix_basics() {
        let e = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(score_matrix(&e, &e, 1.0).unwrap().data(), &[1.0]);
        let o = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(score_matrix(&e, &o, 0.1).unwrap().data(), &[0.0]);
        assert!(score_matrix(&e, &o, 0.0).is_err());
    }

    #[test]
    fn dual_softmax_saturates_diagonal() {
        let s = Tensor::new(&[2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        let p = dual_softmax(&s).unwrap();
        assert!(p.data()[0] >= 0.99 && p.data()[3] >= 0.99);
        assert_eq!(
            dual_softmax(&Tensor::new(&[1, 1], vec![3.0]).unwrap()).unwrap().data(),
            &[1.0]
        );
    }

    #[test]
    fn mnn_examples() {
        let p = Tensor::new(&[2, 2], vec![0.9, 0.0, 0.0, 0.8]).unwrap();
        let m = mnn_filter(&p, 0.01).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].i, m[0].j, m[1].i, m[1].j), (0, 0, 1, 1));
        let flat = Tensor::full(&[3, 4], 1.0 / 12.0);
        assert!(mnn_filter(&flat, 0.1).unwrap().is_empty());
    }

    #[test]
    fn horizontal_line_projection() {
        let (dx, dy) = epipolar_offset([0.0, 1.0, -2.0], 3.0, 5.0, 1e-9).unwrap();
        assert!(dx.abs() < 1e-12 && (dy + 3.0).abs() < 1e-8);
        let coarse = MatchSet::new(
            MatchKind::Coarse,
            vec![Match {
                p1: (0.0, 0.0),
                p2: (3.0, 5.0),
                confidence: 0.5,
            }],
        );
        let f = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -2.0);
        assert_eq!(refine_semi_dense(&coarse, &f, 2, 1e-9).unwrap().dropped_by_filter, 1);
        let kept = refine_semi_dense(&coarse, &f, 4, 1e-9).unwrap();
        assert!((kept.pairs[0].p2.1 - 2.0).abs() < 1e-8);
        assert!(epipolar_offset([0.0, 0.0, 1.0], 1.0, 1.0, 1e-9).is_none());
    }

    #[test]
    fn topk_coarse_centres() {
        let mut m = Tensor::zeros(&[4, 4]);
        m.data_mut()[6] = 1.0;
        let c = topk_coarse(&m, 4, 3).unwrap();
        assert_eq!(c[0], (10.0, 6.0));
        assert_eq!(c[1], (2.0, 2.0));
        assert_eq!(topk_coarse(&m, 4, 100).unwrap().len(), 16);
    }

    #[test]
    fn report_json() {
        let s = MatchSet::new(
            MatchKind::Sparse,
            vec![Match {
                p1: (1.0, 2.0),
                p2: (3.0, 4.5),
                confidence: 0.25,
            }],
        );
        assert_eq!(
            s.to_json(),
            r#"{"kind":"sparse","pairs":[[1.000000,2.000000,3.000000,4.500000,0.250000]],"degraded":false,"dropped_by_filter":0}"#
        );
    }
}
