//! `train`: descriptor stage, then keypoint stage with the descriptor frozen.
//!
//! Output layout: `checkpoint/` (weights plus steps completed per stage),
//! `descriptor_curve.csv`, `keypoint_curve.csv`. `--resume <dir>` continues
//! from a previous output directory up to the configured step counts.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use defmatch::geometry::SceneParams;
use defmatch::model::{Branches, Weights};
use defmatch::train::{train_descriptor_branch, train_keypoint_branch, training_pairs, LossCurve, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::{self, ModelSize, SceneFlags};
use crate::{CliError, CliResult, Common};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Descriptor,
    Keypoint,
    #[default]
    Both,
}

impl Stage {
    fn descriptor(self) -> bool {
        self != Stage::Keypoint
    }

    fn keypoint(self) -> bool {
        self != Stage::Descriptor
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub scene: SceneFlags,
    /// Stages to run [default: both]
    #[arg(long, value_enum)]
    pub stage: Option<Stage>,
    /// Network width [default: toy]
    #[arg(long, value_enum)]
    pub model: Option<ModelSize>,
    /// Steps per stage [default: 200]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Descriptor-stage step size [default: 0.1]
    #[arg(long)]
    pub descriptor_lr: Option<f64>,
    /// Keypoint-stage step size [default: 0.5]
    #[arg(long)]
    pub keypoint_lr: Option<f64>,
    /// Generated training pairs [default: 8]
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Initial weights, e.g. a descriptor-only checkpoint for --stage keypoint
    #[arg(long, conflicts_with = "resume")]
    pub weights: Option<PathBuf>,
    /// Previous output directory to continue from
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Resolved `train` configuration. `seed` overrides both stage seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub seed: u64,
    pub stage: Stage,
    pub model: ModelSize,
    pub pairs: usize,
    /// Ground-truth rows per training pair.
    pub gt_rows: usize,
    pub scene: SceneParams,
    pub descriptor: TrainConfig,
    pub keypoint: TrainConfig,
    pub weights: Option<PathBuf>,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            seed: 0,
            stage: Stage::Both,
            model: ModelSize::Toy,
            pairs: 8,
            gt_rows: 1024,
            scene: SceneParams::default(),
            descriptor: TrainConfig::default(),
            keypoint: TrainConfig::keypoint_stage(),
            weights: None,
        }
    }
}

impl TrainRun {
    pub fn resolve(args: &TrainArgs) -> CliResult<Self> {
        let mut run: TrainRun = config::load(&args.common)?;
        config::set(&mut run.seed, &args.common.seed);
        config::set(&mut run.stage, &args.stage);
        config::set(&mut run.model, &args.model);
        config::set(&mut run.pairs, &args.pairs);
        config::set(&mut run.descriptor.steps, &args.steps);
        config::set(&mut run.keypoint.steps, &args.steps);
        config::set(&mut run.descriptor.lr, &args.descriptor_lr);
        config::set(&mut run.keypoint.lr, &args.keypoint_lr);
        if args.weights.is_some() {
            run.weights.clone_from(&args.weights);
        }
        args.scene.apply(&mut run.scene);
        run.descriptor.seed = run.seed;
        run.keypoint.seed = run.seed;
        if run.pairs == 0 {
            return Err(CliError::Usage("need at least one training pair".into()));
        }
        Ok(run)
    }
}

/// Steps completed per stage, stored in the checkpoint manifest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Progress {
    pub descriptor_steps: usize,
    pub keypoint_steps: usize,
}

const DESCRIPTOR_CURVE: &str = "descriptor_curve.csv";
const KEYPOINT_CURVE: &str = "keypoint_curve.csv";

fn read_curve(path: &Path) -> CliResult<Option<LossCurve>> {
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(LossCurve::from_csv(&fs::read_to_string(path)?)?))
}

fn load_checkpoint(dir: &Path) -> CliResult<(Weights, Progress)> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::Usage(format!("no checkpoint at {}", dir.display())));
    }
    let (w, meta) = Weights::load(dir)?;
    let progress = serde_json::from_value(meta).unwrap_or_default();
    Ok((w, progress))
}

/// Weights, progress and earlier curves to start from.
fn starting_point(run: &TrainRun, resume: Option<&Path>) -> CliResult<(Weights, Progress, [Option<LossCurve>; 2])> {
    if let Some(dir) = resume {
        let (mut w, progress) = load_checkpoint(&dir.join("checkpoint"))?;
        w.fill_missing(run.seed)?;
        let curves = [
            read_curve(&dir.join(DESCRIPTOR_CURVE))?,
            read_curve(&dir.join(KEYPOINT_CURVE))?,
        ];
        return Ok((w, progress, curves));
    }
    match &run.weights {
        Some(dir) => {
            let (mut w, _) = load_checkpoint(dir)?;
            w.fill_missing(run.seed)?;
            Ok((w, Progress::default(), [None, None]))
        }
        None => {
            if run.stage == Stage::Keypoint {
                return Err(CliError::Usage("--stage keypoint needs --weights or --resume".into()));
            }
            Ok((
                Weights::init(run.model.config(), run.seed)?,
                Progress::default(),
                [None, None],
            ))
        }
    }
}

fn append(earlier: Option<LossCurve>, new: LossCurve) -> LossCurve {
    match earlier {
        Some(mut c) if c.columns == new.columns => {
            c.rows
                .retain(|(s, _)| new.rows.first().is_none_or(|(first, _)| s < first));
            c.rows.extend(new.rows);
            c
        }
        _ => new,
    }
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let run = TrainRun::resolve(args)?;
    let out = &args.common.out_dir;
    let (mut weights, mut progress, [dcurve, kcurve]) = starting_point(&run, args.resume.as_deref())?;
    config::echo(out, &run)?;
    let pairs = training_pairs(run.seed, run.pairs, &run.scene, run.gt_rows)?;

    if run.stage.descriptor() {
        let cfg = TrainConfig {
            steps: run.descriptor.steps.saturating_sub(progress.descriptor_steps),
            ..run.descriptor.clone()
        };
        let curve = train_descriptor_branch(&mut weights, &pairs, &cfg, progress.descriptor_steps)?;
        progress.descriptor_steps += cfg.steps;
        let curve = append(dcurve, curve);
        config::write_text(&out.join(DESCRIPTOR_CURVE), &curve.to_csv())?;
        report("descriptor", &curve);
    }
    if run.stage.keypoint() {
        let cfg = TrainConfig {
            steps: run.keypoint.steps.saturating_sub(progress.keypoint_steps),
            ..run.keypoint.clone()
        };
        let curve = train_keypoint_branch(&mut weights, &pairs, &cfg, progress.keypoint_steps)?;
        progress.keypoint_steps += cfg.steps;
        let curve = append(kcurve, curve);
        config::write_text(&out.join(KEYPOINT_CURVE), &curve.to_csv())?;
        report("keypoint", &curve);
    }

    let saved =
        if run.stage == Stage::Descriptor && weights.branches() == Branches::Both && progress.keypoint_steps == 0 {
            weights.descriptor_only()
        } else {
            weights
        };
    let ckpt = out.join("checkpoint");
    if ckpt.exists() {
        fs::remove_dir_all(&ckpt)?;
    }
    saved.save(&ckpt, serde_json::to_value(progress)?)?;
    Ok(())
}

fn report(stage: &str, curve: &LossCurve) {
    let t = curve.totals();
    if let (Some(first), Some(last)) = (t.first(), t.last()) {
        eprintln!("{stage}: {} steps, loss {first} -> {last}", t.len());
    }
}
