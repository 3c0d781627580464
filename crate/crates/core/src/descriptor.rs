//! Descriptor branch: strided residual backbone, deformable encoder, fusion
//! into a dense descriptor map `D` at `1/k` and a matchability map `M`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{fuse_pyramid_vars, sine_embedding, DeformAttnConfig, EncoderLayerParams, EncoderLayerVars};
use crate::error::{Error, Result};
use crate::keypoint::{conv_bias, Keypoint};
use crate::numeric::{Tape, Tensor, Var};
use crate::params::{init_conv, Bound, ParamStore};

/// Extents must be a multiple of this (the coarsest level is `1/64`).
pub const DESCRIPTOR_STRIDE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescriptorNetConfig {
    /// Backbone widths at `1/4 … 1/64`.
    pub backbone_widths: [usize; 5],
    pub stem_width: usize,
    pub res_blocks: usize,
    /// Descriptor width `C`.
    pub channels: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub points: usize,
    /// Patch size `k` of the descriptor map.
    pub patch: usize,
}

impl Default for DescriptorNetConfig {
    fn default() -> Self {
        Self {
            backbone_widths: [16, 16, 32, 32, 32],
            stem_width: 16,
            res_blocks: 2,
            channels: 32,
            encoder_layers: 4,
            heads: 8,
            points: 8,
            patch: 4,
        }
    }
}

impl DescriptorNetConfig {
    pub fn levels(&self) -> usize {
        self.backbone_widths.len()
    }

    pub fn attn(&self) -> DeformAttnConfig {
        DeformAttnConfig {
            channels: self.channels,
            heads: self.heads,
            points: self.points,
            levels: self.levels(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.patch != 4 {
            return Err(Error::invalid(format!(
                "the descriptor map is fused at 1/4, so the patch size must be 4, got {}",
                self.patch
            )));
        }
        if self.backbone_widths.contains(&0) || self.stem_width == 0 || self.channels == 0 {
            return Err(Error::invalid("network widths must be positive"));
        }
        Ok(())
    }
}

/// Dense descriptors and matchability at `1/k` of the image.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorField {
    /// `[H/k × W/k × C]`.
    pub d: Tensor,
    /// `[H/k × W/k]`, entries in `[0, 1]`.
    pub m: Tensor,
    pub k: usize,
}

#[derive(Serialize, Deserialize)]
struct FieldManifest {
    k: usize,
    channels: usize,
    descriptors: String,
    matchability: String,
}

impl DescriptorField {
    pub fn new(d: Tensor, m: Tensor, k: usize) -> Result<Self> {
        if d.rank() != 3 || m.rank() != 2 || d.shape()[..2] != *m.shape() {
            return Err(Error::shape(format!(
                "descriptor map {:?} and matchability {:?} must share extents",
                d.shape(),
                m.shape()
            )));
        }
        if k == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        if m.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("matchability must lie in [0, 1]"));
        }
        Ok(Self { d, m, k })
    }

    pub fn channels(&self) -> usize {
        self.d.shape()[2]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.d.shape()[0], self.d.shape()[1])
    }

    /// Writes `descriptors.dten`, `matchability.dten` and `field.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.d.save(&dir.join("descriptors.dten"))?;
        self.m.save(&dir.join("matchability.dten"))?;
        let manifest = FieldManifest {
            k: self.k,
            channels: self.channels(),
            descriptors: "descriptors.dten".into(),
            matchability: "matchability.dten".into(),
        };
        fs::write(dir.join("field.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("field.json");
        let manifest: FieldManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let field = Self::new(
            Tensor::load(&dir.join(&manifest.descriptors))?,
            Tensor::load(&dir.join(&manifest.matchability))?,
            manifest.k,
        )?;
        if field.channels() != manifest.channels {
            return Err(Error::Format {
                path,
                reason: format!(
                    "manifest declares {} channels, tensor has {}",
                    manifest.channels,
                    field.channels()
                ),
            });
        }
        Ok(field)
    }
}

/// Fresh descriptor-branch parameters under the `desc.` prefix.
pub fn init_descriptor_params<R: Rng + ?Sized>(cfg: &DescriptorNetConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    store.insert("desc.stem", init_conv(3, 3, cfg.stem_width, rng));
    store.insert("desc.stem_bias", Tensor::zeros(&[cfg.stem_width]));
    let mut cin = cfg.stem_width;
    for (l, &w) in cfg.backbone_widths.iter().enumerate() {
        store.insert(format!("desc.l{l}.down"), init_conv(3, cin, w, rng));
        store.insert(format!("desc.l{l}.down_bias"), Tensor::zeros(&[w]));
        for b in 0..cfg.res_blocks {
            store.insert(format!("desc.l{l}.res{b}.conv1"), init_conv(3, w, w, rng));
            store.insert(format!("desc.l{l}.res{b}.bias1"), Tensor::zeros(&[w]));
            store.insert(
                format!("desc.l{l}.res{b}.conv2"),
                init_conv(3, w, w, rng).map(|v| v * 0.3),
            );
            store.insert(format!("desc.l{l}.res{b}.bias2"), Tensor::zeros(&[w]));
        }
        store.insert(
            format!("desc.l{l}.proj"),
            init_conv(1, w, cfg.channels, rng).map(|v| v * 0.7),
        );
        store.insert(format!("desc.l{l}.proj_bias"), Tensor::zeros(&[cfg.channels]));
        cin = w;
    }
    store.insert("desc.level_embed", Tensor::zeros(&[cfg.levels()]));
    for i in 0..cfg.encoder_layers {
        EncoderLayerParams::init(cfg.attn(), rng)?.write_to(&mut store, &format!("desc.enc{i}"));
    }
    store.insert("desc.match_head", init_conv(1, cfg.channels, 1, rng).map(|v| v * 0.1));
    store.insert("desc.match_bias", Tensor::zeros(&[1]));
    Ok(store)
}

/// Descriptor map `[H/k × W/k × C]` and matchability `[H/k × W/k]` on the tape.
pub fn describe_vars<'t>(image: Var<'t>, bound: &Bound<'t>, cfg: &DescriptorNetConfig) -> Result<(Var<'t>, Var<'t>)> {
    cfg.validate()?;
    let s = image.shape();
    let [h, w, 3] = s[..] else {
        return Err(Error::shape(format!("image must be H×W×3, got {s:?}")));
    };
    if h == 0 || w == 0 || h % DESCRIPTOR_STRIDE != 0 || w % DESCRIPTOR_STRIDE != 0 {
        return Err(Error::shape(format!(
            "describe needs extents divisible by {DESCRIPTOR_STRIDE}, got {h}×{w}; pad the image"
        )));
    }
    let tape = image.tape();
    let g = |n: String| bound.get(&n);
    let mut x = conv_bias(image, g("desc.stem".into())?, g("desc.stem_bias".into())?, 2)?.silu();
    let mut levels = Vec::with_capacity(cfg.levels());
    let mut pos = Vec::with_capacity(cfg.levels());
    let embed = g("desc.level_embed".into())?;
    for l in 0..cfg.levels() {
        x = conv_bias(x, g(format!("desc.l{l}.down"))?, g(format!("desc.l{l}.down_bias"))?, 2)?.silu();
        for b in 0..cfg.res_blocks {
            let pre = format!("desc.l{l}.res{b}");
            let y = conv_bias(x, g(format!("{pre}.conv1"))?, g(format!("{pre}.bias1"))?, 1)?.silu();
            let y = conv_bias(y, g(format!("{pre}.conv2"))?, g(format!("{pre}.bias2"))?, 1)?;
            x = x.add(y)?.silu();
        }
        let feat = conv_bias(x, g(format!("desc.l{l}.proj"))?, g(format!("desc.l{l}.proj_bias"))?, 1)?;
        let fs = feat.shape();
        let sine = tape.constant(sine_embedding(fs[0], fs[1], fs[2]));
        let ones = tape.constant(Tensor::full(&fs, 1.0));
        pos.push(sine.add(ones.mul_scalar_var(embed.gather(&[l])?)?)?);
        levels.push(feat);
    }
    let layers = (0..cfg.encoder_layers)
        .map(|i| EncoderLayerVars::from_bound(bound, &format!("desc.enc{i}"), cfg.attn()))
        .collect::<Result<Vec<_>>>()?;
    let encoded = crate::attention::encoder_forward_vars(&levels, &pos, &layers)?;
    let (gh, gw) = (h / cfg.patch, w / cfg.patch);
    let d = fuse_pyramid_vars(&encoded, gh, gw)?;
    let m = conv_bias(d, g("desc.match_head".into())?, g("desc.match_bias".into())?, 1)?
        .sigmoid()
        .reshape(&[gh, gw])?;
    Ok((d, m))
}

/// Evaluates the descriptor branch on an `H × W × 3` image.
pub fn describe(image: &Tensor, params: &ParamStore, cfg: &DescriptorNetConfig) -> Result<DescriptorField> {
    let tape = Tape::new();
    let bound = params.bind(&tape, |_| false);
    let (d, m) = describe_vars(tape.constant(image.clone()), &bound, cfg)?;
    let (d, m) = ((*d.value()).clone(), (*m.value()).clone());
    if !d.all_finite() || !m.all_finite() {
        return Err(Error::NonFinite("descriptor field".into()));
    }
    DescriptorField::new(d, m, cfg.patch)
}

/// Index coordinates of continuous image points on a `1/k` map.
pub fn to_patch_coords(points: &[(f64, f64)], k: usize) -> Vec<(f64, f64)> {
    let k = k as f64;
    points.iter().map(|&(x, y)| (x / k - 0.5, y / k - 0.5)).collect()
}

/// Unit-norm descriptors sampled bilinearly at continuous image points, on
/// the tape. Returns `[N × C]`.
pub fn sample_descriptors_vars<'t>(d: Var<'t>, points: &[(f64, f64)], k: usize) -> Result<Var<'t>> {
    let pc = to_patch_coords(points, k);
    let flat: Vec<f64> = pc.iter().flat_map(|&(x, y)| [x, y]).collect();
    let pts = d.tape().constant(Tensor::new(&[pc.len(), 2], flat)?);
    d.bilinear_sample(pts)?.l2_normalize_rows()
}

/// Unit-norm descriptors at keypoint locations, sampled from `D` at `p/k`
/// without materializing the upsampled map.
pub fn sample_descriptors(field: &DescriptorField, kps: &[Keypoint], image_extents: (usize, usize)) -> Result<Tensor> {
    let (h, w) = image_extents;
    for kp in kps {
        if !(0.0..=w as f64).contains(&kp.x) || !(0.0..=h as f64).contains(&kp.y) {
            return Err(Error::invalid(format!(
                "keypoint ({}, {}) outside the {w}×{h} image",
                kp.x, kp.y
            )));
        }
    }
    sample_descriptors_at(field, &kps.iter().map(|k| (k.x, k.y)).collect::<Vec<_>>())
}

/// As [`sample_descriptors`] for raw points.
pub fn sample_descriptors_at(field: &DescriptorField, points: &[(f64, f64)]) -> Result<Tensor> {
    if points.is_empty() {
        return Ok(Tensor::zeros(&[0, field.channels()]));
    }
    let tape = Tape::new();
    let v = sample_descriptors_vars(tape.constant(field.d.clone()), points, field.k)?;
    Ok((*v.value()).clone())
}
