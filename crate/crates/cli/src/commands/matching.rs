//! `match`: sparse or semi-dense matching of one pair, with a report and an
//! overlay.

use std::path::{Path, PathBuf};

use clap::Args;
use defmatch::geometry::{intrinsics, ransac_fundamental, synth_scene, ScenePair, SceneParams};
use defmatch::matcher::{match_semi_dense, match_sparse, MatchConfig, MatchSet};
use defmatch::numeric::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{self, MatchFlags, SceneFlags, WeightFlags, WeightSource};
use crate::overlay::{self, Reference};
use crate::{CliError, CliResult, Common};

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub weights: WeightFlags,
    #[command(flatten)]
    pub scene: SceneFlags,
    #[command(flatten)]
    pub matching: MatchFlags,
    /// Scene directory written by the library (`scene.json` + tensors)
    #[arg(long, conflicts_with_all = ["image1", "image2"])]
    pub scene_dir: Option<PathBuf>,
    /// First image (PNG); requires --image2
    #[arg(long, requires = "image2")]
    pub image1: Option<PathBuf>,
    /// Second image (PNG); requires --image1
    #[arg(long, requires = "image1")]
    pub image2: Option<PathBuf>,
    /// Refine coarse matches along epipolar lines
    #[arg(long)]
    pub semi_dense: bool,
}

/// Resolved `match` configuration. Without a scene directory or images the
/// pair is generated from `seed` and `scene`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchRun {
    pub seed: u64,
    pub scene: SceneParams,
    pub scene_dir: Option<PathBuf>,
    pub image1: Option<PathBuf>,
    pub image2: Option<PathBuf>,
    pub source: WeightSource,
    pub semi_dense: bool,
    pub matching: MatchConfig,
}

impl MatchRun {
    pub fn resolve(args: &MatchArgs) -> CliResult<Self> {
        let mut run: MatchRun = config::load(&args.common)?;
        config::set(&mut run.seed, &args.common.seed);
        args.scene.apply(&mut run.scene);
        args.matching.apply(&mut run.matching);
        args.weights.apply(&mut run.source);
        if args.scene_dir.is_some() {
            run.scene_dir.clone_from(&args.scene_dir);
            run.image1 = None;
            run.image2 = None;
        }
        if args.image1.is_some() {
            run.image1.clone_from(&args.image1);
            run.image2.clone_from(&args.image2);
            run.scene_dir = None;
        }
        run.semi_dense |= args.semi_dense;
        run.matching.seed = run.seed;
        Ok(run)
    }
}

fn read_png(path: &Path) -> CliResult<Tensor> {
    let img = image::open(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(overlay::from_rgb(&img.to_rgb8()))
}

/// Images of the pair and, for scenes, their ground truth.
fn inputs(run: &MatchRun) -> CliResult<(Tensor, Tensor, Option<ScenePair>)> {
    match (&run.scene_dir, &run.image1, &run.image2) {
        (Some(dir), _, _) => {
            if !dir.join("scene.json").is_file() {
                return Err(CliError::Usage(format!("no scene at {}", dir.display())));
            }
            let s = ScenePair::load(dir)?;
            Ok((s.image1.clone(), s.image2.clone(), Some(s)))
        }
        (None, Some(a), Some(b)) => Ok((read_png(a)?, read_png(b)?, None)),
        (None, None, None) => {
            let s = synth_scene(run.seed, &run.scene)?;
            Ok((s.image1.clone(), s.image2.clone(), Some(s)))
        }
        _ => Err(CliError::Usage("--image1 and --image2 go together".into())),
    }
}

/// Ground truth when available, else a RANSAC fit with default intrinsics.
fn reference(run: &MatchRun, scene: Option<&ScenePair>, image: &Tensor, m: &MatchSet) -> Reference {
    if let Some(s) = scene {
        return Reference::from_scene(s);
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let c = &run.matching;
    match ransac_fundamental(&m.points1(), &m.points2(), c.ransac_iters, c.ransac_thresh, run.seed) {
        Ok((f, _)) => Reference::from_fundamental(f.matrix(), &intrinsics(w, h, 1.0)),
        Err(_) => Reference::None,
    }
}

pub fn run(args: &MatchArgs) -> CliResult<()> {
    let run = MatchRun::resolve(args)?;
    let out = &args.common.out_dir;
    let (img1, img2, scene) = inputs(&run)?;
    let weights = run.source.resolve(run.seed)?;
    config::echo(out, &run)?;
    let m = if run.semi_dense {
        match_semi_dense(&img1, &img2, &weights, &run.matching)?
    } else {
        match_sparse(&img1, &img2, &weights, &run.matching)?
    };
    config::write_text(&out.join("matches.json"), &(m.to_json() + "\n"))?;
    let r = reference(&run, scene.as_ref(), &img1, &m);
    let canvas = overlay::render(&img1, &img2, &m, &r);
    canvas.save(out.join("overlay.png"))?;
    let good = overlay::colours(&m, &r)
        .iter()
        .filter(|c| **c == overlay::GREEN)
        .count();
    eprintln!(
        "{} {} matches, {good} within the epipolar threshold{}",
        m.len(),
        m.kind.as_str(),
        if m.degraded { " (degraded to sparse)" } else { "" }
    );
    Ok(())
}
