//! Run-config loading, flag overrides and the resolved-config echo.

use std::fs;
use std::path::{Path, PathBuf};

use defmatch::geometry::{DepthProfile, SceneParams};
use defmatch::matcher::MatchConfig;
use defmatch::model::{ModelConfig, Weights};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult, Common};

/// Reads the `--config` file, or the defaults when there is none.
pub fn load<T: DeserializeOwned + Default>(common: &Common) -> CliResult<T> {
    match &common.config {
        None => Ok(T::default()),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
        }
    }
}

/// Assigns `flag` to `slot` when the flag was given.
pub fn set<T: Clone>(slot: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = v.clone();
    }
}

/// Creates the output directory and writes `config.json` into it.
pub fn echo<T: Serialize>(out_dir: &Path, config: &T) -> CliResult<()> {
    fs::create_dir_all(out_dir)?;
    write_text(
        &out_dir.join("config.json"),
        &(serde_json::to_string_pretty(config)? + "\n"),
    )
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

/// Network width for freshly initialised weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    #[default]
    Toy,
    Full,
}

impl ModelSize {
    pub fn config(self) -> ModelConfig {
        match self {
            ModelSize::Toy => ModelConfig::toy(),
            ModelSize::Full => ModelConfig::default(),
        }
    }
}

/// Where network weights come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightSource {
    /// Checkpoint directory.
    pub weights: Option<PathBuf>,
    /// Initialise from the run seed instead of loading a checkpoint.
    pub random_init: bool,
    pub model: ModelSize,
}

impl WeightSource {
    pub fn resolve(&self, seed: u64) -> CliResult<Weights> {
        match (&self.weights, self.random_init) {
            (Some(_), true) => Err(CliError::Usage("--weights and --random-init are exclusive".into())),
            (Some(dir), false) => {
                if !dir.join("manifest.json").is_file() {
                    return Err(CliError::Usage(format!("no checkpoint at {}", dir.display())));
                }
                Ok(Weights::load(dir)?.0)
            }
            (None, true) => Ok(Weights::init(self.model.config(), seed)?),
            (None, false) => Err(CliError::Usage("need --weights <dir> or --random-init".into())),
        }
    }
}

/// Scene-shape flags shared by the commands that generate scenes.
#[derive(clap::Args, Debug, Clone, Default)]
pub struct SceneFlags {
    /// Image width [default: 64]
    #[arg(long)]
    pub width: Option<usize>,
    /// Image height [default: 64]
    #[arg(long)]
    pub height: Option<usize>,
    /// Depth profile: plane, ridge or cloud [default: plane]
    #[arg(long)]
    pub profile: Option<DepthProfile>,
    /// Baseline over mean depth [default: 0.1]
    #[arg(long)]
    pub baseline: Option<f64>,
    /// Relative rotation in degrees [default: 3]
    #[arg(long)]
    pub rotation: Option<f64>,
}

impl SceneFlags {
    pub fn apply(&self, p: &mut SceneParams) {
        set(&mut p.width, &self.width);
        set(&mut p.height, &self.height);
        set(&mut p.profile, &self.profile);
        set(&mut p.baseline, &self.baseline);
        set(&mut p.rotation_deg, &self.rotation);
    }
}

/// Matcher flags shared by `match` and `eval`.
#[derive(clap::Args, Debug, Clone, Default)]
pub struct MatchFlags {
    /// Keypoints kept per image [default: 500]
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Score threshold of the keypoint NMS [default: 0.2]
    #[arg(long)]
    pub nms_threshold: Option<f64>,
    /// Dual-softmax temperature [default: 0.1]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Minimum dual-softmax probability of a match [default: 0.01]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Coarse patches per image for semi-dense matching [default: 256]
    #[arg(long)]
    pub coarse_top_k: Option<usize>,
    /// Fit the refinement F with RANSAC instead of plain eight-point
    #[arg(long)]
    pub robust_f: bool,
}

impl MatchFlags {
    pub fn apply(&self, m: &mut MatchConfig) {
        set(&mut m.detect.top_k, &self.top_k);
        set(&mut m.detect.threshold, &self.nms_threshold);
        set(&mut m.tau, &self.tau);
        set(&mut m.threshold, &self.threshold);
        set(&mut m.coarse_top_k, &self.coarse_top_k);
        m.robust_f |= self.robust_f;
    }
}

/// Weight-source flags.
#[derive(clap::Args, Debug, Clone, Default)]
pub struct WeightFlags {
    /// Checkpoint directory written by `train`
    #[arg(long, conflicts_with = "random_init")]
    pub weights: Option<PathBuf>,
    /// Use freshly initialised weights drawn from the seed
    #[arg(long)]
    pub random_init: bool,
    /// Network width for --random-init [default: toy]
    #[arg(long, value_enum)]
    pub model: Option<ModelSize>,
}

impl WeightFlags {
    pub fn apply(&self, w: &mut WeightSource) {
        if self.weights.is_some() {
            w.weights.clone_from(&self.weights);
            w.random_init = false;
        }
        if self.random_init {
            w.random_init = true;
            w.weights = None;
        }
        set(&mut w.model, &self.model);
    }
}
