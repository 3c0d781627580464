//! `eval`: pose AUC and homography accuracy over generated scenes.

use clap::Args;
use defmatch::evaluate::{aggregate, evaluate_scene, DescriptorMode, EvalConfig, SceneOutcome};
use serde::{Deserialize, Serialize};

use crate::config::{self, MatchFlags, SceneFlags, WeightFlags, WeightSource};
use crate::{CliError, CliResult, Common};

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub weights: WeightFlags,
    #[command(flatten)]
    pub scene: SceneFlags,
    #[command(flatten)]
    pub matching: MatchFlags,
    /// Number of scenes; scene i uses seed + i [default: 20]
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Descriptor source: trained, oracle or random [default: trained]
    #[arg(long)]
    pub mode: Option<DescriptorMode>,
    /// Evaluate semi-dense instead of sparse matches
    #[arg(long)]
    pub semi_dense: bool,
    /// RANSAC iterations for pose and homography [default: 1000]
    #[arg(long)]
    pub ransac_iters: Option<usize>,
    /// RANSAC inlier threshold in pixels [default: 1]
    #[arg(long)]
    pub ransac_thresh: Option<f64>,
}

/// Resolved `eval` configuration. Weights are only needed in trained mode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub evaluation: EvalConfig,
    pub source: WeightSource,
}

impl EvalRun {
    pub fn resolve(args: &EvalArgs) -> CliResult<Self> {
        let mut run: EvalRun = config::load(&args.common)?;
        let e = &mut run.evaluation;
        config::set(&mut e.seed, &args.common.seed);
        config::set(&mut e.scenes, &args.scenes);
        config::set(&mut e.mode, &args.mode);
        config::set(&mut e.ransac_iters, &args.ransac_iters);
        config::set(&mut e.ransac_thresh, &args.ransac_thresh);
        e.semi_dense |= args.semi_dense;
        args.scene.apply(&mut e.scene);
        args.matching.apply(&mut e.matching);
        e.matching.seed = e.seed;
        args.weights.apply(&mut run.source);
        Ok(run)
    }
}

fn pool(jobs: Option<usize>) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))
}

/// Per-scene rows with failures written as `null`.
fn scenes_json(outcomes: &[SceneOutcome]) -> CliResult<String> {
    let mut sorted = outcomes.to_vec();
    sorted.sort_by_key(|o| o.seed);
    Ok(serde_json::to_string_pretty(&sorted)? + "\n")
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let run = EvalRun::resolve(args)?;
    let cfg = &run.evaluation;
    let weights = match cfg.mode {
        DescriptorMode::Trained => Some(run.source.resolve(cfg.seed)?),
        _ => None,
    };
    let out = &args.common.out_dir;
    config::echo(out, &run)?;
    let outcomes = pool(args.common.jobs)?.install(|| {
        use rayon::prelude::*;
        (0..cfg.scenes)
            .into_par_iter()
            .map(|i| evaluate_scene(i, weights.as_ref(), cfg))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let report = aggregate(&outcomes)?;
    config::write_text(&out.join("metrics.json"), &(report.to_json() + "\n"))?;
    config::write_text(&out.join("scenes.json"), &scenes_json(&outcomes)?)?;
    eprintln!("{}", report.to_json());
    Ok(())
}
