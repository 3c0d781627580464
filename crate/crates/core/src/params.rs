//! Named parameter storage, tape binding, plain gradient descent and the
//! on-disk checkpoint format (a directory of `DTEN1` files plus a JSON manifest).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Gradients, Tape, Tensor, Var};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Moves every parameter of `other` into `self`, replacing clashes.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`; those selected by `trainable`
    /// become gradient leaves, the rest constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    tape.var(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Every value rounded through `f32`, as a checkpoint round trip keeps it.
    pub fn quantized(&self) -> ParamStore {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.quantized())).collect(),
        }
    }

    /// One clipped gradient-descent step. Returns the pre-clipping global norm.
    pub fn sgd_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64, clip_norm: f64) -> f64 {
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > clip_norm && norm > 0.0 {
            clip_norm / norm
        } else {
            1.0
        };
        for (name, g) in grads {
            if let Some(p) = self.params.get_mut(name) {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * scale * gv;
                }
            }
        }
        norm
    }

    /// Writes `dir/manifest.json` and one `DTEN1` file per parameter.
    pub fn save_checkpoint(&self, dir: &Path, manifest_extra: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut files = BTreeMap::new();
        for (name, t) in &self.params {
            let file = format!("{name}.dten");
            t.save(&dir.join(&file))?;
            files.insert(name.clone(), file);
        }
        let manifest = CheckpointManifest {
            format: "DTEN1".into(),
            params: files,
            extra: manifest_extra,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.format != "DTEN1" {
            return Err(Error::Format {
                path,
                reason: format!("unknown tensor format `{}`", manifest.format),
            });
        }
        let mut store = ParamStore::new();
        for (name, file) in manifest.params {
            store.insert(name, Tensor::load(&dir.join(file))?);
        }
        Ok((store, manifest.extra))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    params: BTreeMap<String, String>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Parameters recorded on a tape for one forward pass.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradients of every trainable parameter (zeros where the loss does not
    /// reach it).
    pub fn grads(&self, g: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), g.wrt_or_zero(*v)))
            .collect()
    }
}

/// He-style normal initialisation for a `k × k × cin × cout` kernel.
pub fn init_conv<R: Rng + ?Sized>(k: usize, cin: usize, cout: usize, rng: &mut R) -> Tensor {
    let fan_in = (k * k * cin) as f64;
    Tensor::randn(&[k, k, cin, cout], (2.0 / fan_in).sqrt(), rng)
}

/// Normal initialisation for a `din × dout` linear map.
pub fn init_linear<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[din, dout], (1.0 / din as f64).sqrt(), rng)
}

/// `x · W + b` over the rows of `x` (`[N × din]`).
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    x.matmul(w)?.add_row(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::randn(&[3, 2], 1.0, &mut rng));
        store.insert("b", Tensor::randn(&[4], 1.0, &mut rng));
        let dir = tempfile::tempdir().unwrap();
        store
            .save_checkpoint(dir.path(), serde_json::json!({"step": 7}))
            .unwrap();
        let (back, extra) = ParamStore::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, store.quantized());
        assert_eq!(extra["step"], 7);
    }

    #[test]
    fn sgd_clips_global_norm() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::zeros(&[2]));
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let norm = store.sgd_step(&grads, 0.5, 1.0);
        assert_eq!(norm, 5.0);
        let p = store.get("p").unwrap().data();
        assert!((p[0] + 0.3).abs() < 1e-15 && (p[1] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn bind_respects_trainable_filter() {
        let mut store = ParamStore::new();
        store.insert("kp.w", Tensor::full(&[1], 2.0));
        store.insert("desc.w", Tensor::full(&[1], 3.0));
        let tape = Tape::new();
        let bound = store.bind(&tape, |n| n.starts_with("kp."));
        let loss = bound
            .get("kp.w")
            .unwrap()
            .mul(bound.get("desc.w").unwrap())
            .unwrap()
            .sum();
        let g = bound.grads(&tape.backward(loss).unwrap());
        assert_eq!(g.len(), 1);
        assert_eq!(g["kp.w"].data(), &[3.0]);
    }
}
