//! Network configuration plus parameters of both branches, with checkpoint
//! I/O.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::{init_descriptor_params, DescriptorNetConfig};
use crate::error::{Error, Result};
use crate::keypoint::{init_keypoint_params, KeypointNetConfig};
use crate::params::ParamStore;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub keypoint: KeypointNetConfig,
    pub descriptor: DescriptorNetConfig,
}

impl ModelConfig {
    /// Narrow network for tests and quick runs.
    pub fn toy() -> Self {
        Self {
            keypoint: KeypointNetConfig {
                level_width: 8,
                head_width: 8,
                kernel: 3,
            },
            descriptor: DescriptorNetConfig {
                backbone_widths: [16, 16, 16, 16, 16],
                stem_width: 8,
                res_blocks: 1,
                channels: 16,
                encoder_layers: 2,
                heads: 4,
                points: 4,
                patch: 4,
            },
        }
    }
}

/// Which branches a parameter set holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    Both,
    DescriptorOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Weights {
    /// Deterministic initialisation; the descriptor branch draws from `seed`
    /// and the keypoint branch from the next stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_descriptor_params(&config.descriptor, &mut rng)?;
        rng.set_stream(1);
        params.extend(init_keypoint_params(&config.keypoint, &mut rng)?);
        Ok(Self { config, params })
    }

    pub fn branches(&self) -> Branches {
        if self.params.names().any(|n| n.starts_with("kp.")) {
            Branches::Both
        } else {
            Branches::DescriptorOnly
        }
    }

    pub fn descriptor_params(&self) -> ParamStore {
        self.params.subset("desc.")
    }

    /// The same weights without the keypoint branch.
    pub fn descriptor_only(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.descriptor_params(),
        }
    }

    /// Adds any parameter missing from `self` with its value from
    /// `Weights::init(config, seed)`.
    pub fn fill_missing(&mut self, seed: u64) -> Result<()> {
        let fresh = Self::init(self.config.clone(), seed)?;
        for (name, value) in fresh.params.iter() {
            if !self.params.contains(name) {
                self.params.insert(name.clone(), value.clone());
            }
        }
        Ok(())
    }

    /// Saves a checkpoint with the config and `extra` under `"meta"`.
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let manifest = serde_json::json!({ "model": self.config, "meta": extra });
        self.params.save_checkpoint(dir, manifest)
    }

    /// Loads a checkpoint and its `"meta"` value.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (params, extra) = ParamStore::load_checkpoint(dir)?;
        let config: ModelConfig =
            serde_json::from_value(extra.get("model").cloned().ok_or_else(|| Error::Format {
                path: dir.to_path_buf(),
                reason: "checkpoint manifest lacks the model config".into(),
            })?)?;
        let meta = extra.get("meta").cloned().unwrap_or(serde_json::Value::Null);
        Ok((Self { config, params }, meta))
    }
}
