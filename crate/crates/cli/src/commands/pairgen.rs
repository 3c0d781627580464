//! `pairgen`: generates candidate scenes with varied motion and keeps those
//! whose overlap lies strictly inside a band of matching pixels.

use clap::Args;
use defmatch::geometry::{overlap_count, synth_scene, SceneParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, SceneFlags};
use crate::{CliError, CliResult, Common};

/// Band of matching pixels used at the reference extent.
pub const REFERENCE_BAND: (f64, f64) = (2000.0, 20000.0);
/// Longer image side the reference band was chosen for.
pub const REFERENCE_EXTENT: f64 = 800.0;

#[derive(Args, Debug)]
pub struct PairgenArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub scene: SceneFlags,
    /// Candidate scenes [default: 64]
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Largest candidate baseline [default: 1.5]
    #[arg(long)]
    pub max_baseline: Option<f64>,
    /// Largest candidate rotation in degrees [default: 40]
    #[arg(long)]
    pub max_rotation: Option<f64>,
    /// Lower overlap bound; overrides the scaled default
    #[arg(long)]
    pub lo: Option<f64>,
    /// Upper overlap bound; overrides the scaled default
    #[arg(long)]
    pub hi: Option<f64>,
    /// Use 2000-20000 as is instead of scaling it to the image extent
    #[arg(long)]
    pub unscaled_band: bool,
}

/// Resolved `pairgen` configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairgenRun {
    pub seed: u64,
    pub candidates: usize,
    /// Image size and depth profile of every candidate.
    pub scene: SceneParams,
    pub max_baseline: f64,
    pub max_rotation_deg: f64,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub unscaled_band: bool,
}

impl Default for PairgenRun {
    fn default() -> Self {
        Self {
            seed: 0,
            candidates: 64,
            scene: SceneParams::default(),
            max_baseline: 1.5,
            max_rotation_deg: 40.0,
            lo: None,
            hi: None,
            unscaled_band: false,
        }
    }
}

impl PairgenRun {
    pub fn resolve(args: &PairgenArgs) -> CliResult<Self> {
        let mut run: PairgenRun = config::load(&args.common)?;
        config::set(&mut run.seed, &args.common.seed);
        config::set(&mut run.candidates, &args.candidates);
        config::set(&mut run.max_baseline, &args.max_baseline);
        config::set(&mut run.max_rotation_deg, &args.max_rotation);
        if args.lo.is_some() {
            run.lo = args.lo;
        }
        if args.hi.is_some() {
            run.hi = args.hi;
        }
        run.unscaled_band |= args.unscaled_band;
        args.scene.apply(&mut run.scene);
        if [run.max_baseline, run.max_rotation_deg]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return Err(CliError::Usage("motion ranges must be non-negative".into()));
        }
        Ok(run)
    }

    /// `(lo, hi)`: explicit bounds win; otherwise the reference band, scaled
    /// by `(extent / 800)²` for images smaller than the reference extent.
    pub fn band(&self) -> (f64, f64) {
        let extent = self.scene.width.max(self.scene.height) as f64;
        let scale = if self.unscaled_band || extent >= REFERENCE_EXTENT {
            1.0
        } else {
            (extent / REFERENCE_EXTENT).powi(2)
        };
        (
            self.lo.unwrap_or(REFERENCE_BAND.0 * scale),
            self.hi.unwrap_or(REFERENCE_BAND.1 * scale),
        )
    }

    /// Candidate `i`: its scene seed and motion, drawn from stream `i`.
    pub fn candidate(&self, i: usize) -> (u64, SceneParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        let seed = rng.random();
        let params = SceneParams {
            baseline: rng.random::<f64>() * self.max_baseline,
            rotation_deg: rng.random::<f64>() * self.max_rotation_deg,
            ..self.scene.clone()
        };
        (seed, params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub seed: u64,
    pub baseline: f64,
    pub rotation_deg: f64,
    pub overlap: usize,
    pub kept: bool,
}

/// Keeps `overlap ∈ (lo, hi)`.
pub fn in_band(overlap: usize, band: (f64, f64)) -> bool {
    let o = overlap as f64;
    band.0 < o && o < band.1
}

#[derive(Serialize)]
struct Report<'a> {
    band: [f64; 2],
    kept: usize,
    candidates: &'a [Candidate],
}

pub fn run(args: &PairgenArgs) -> CliResult<()> {
    let run = PairgenRun::resolve(args)?;
    let out = &args.common.out_dir;
    config::echo(out, &run)?;
    let band = run.band();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.common.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let candidates = pool.install(|| {
        use rayon::prelude::*;
        (0..run.candidates)
            .into_par_iter()
            .map(|i| {
                let (seed, params) = run.candidate(i);
                let overlap = overlap_count(&synth_scene(seed, &params)?);
                Ok(Candidate {
                    seed,
                    baseline: params.baseline,
                    rotation_deg: params.rotation_deg,
                    overlap,
                    kept: in_band(overlap, band),
                })
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    let kept = candidates.iter().filter(|c| c.kept).count();
    let report = Report {
        band: [band.0, band.1],
        kept,
        candidates: &candidates,
    };
    config::write_text(
        &out.join("pairs.json"),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    eprintln!(
        "kept {kept} of {} candidates, band ({}, {})",
        candidates.len(),
        band.0,
        band.1
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_scales_with_area_below_reference_extent() {
        let run = PairgenRun::default();
        let (lo, hi) = run.band();
        assert!((lo - 2000.0 * 0.0064).abs() < 1e-9 && (hi - 20000.0 * 0.0064).abs() < 1e-9);
        let unscaled = PairgenRun {
            unscaled_band: true,
            ..PairgenRun::default()
        };
        assert_eq!(unscaled.band(), REFERENCE_BAND);
        assert!(in_band(4096, REFERENCE_BAND));
        assert!(!in_band(0, run.band()));
        assert!(!in_band(2000, REFERENCE_BAND));
    }

    #[test]
    fn candidates_depend_only_on_seed_and_index() {
        let run = PairgenRun::default();
        assert_eq!(run.candidate(3), run.candidate(3));
        assert_ne!(run.candidate(3).0, run.candidate(4).0);
        let (_, p) = run.candidate(5);
        assert!(p.baseline <= run.max_baseline && p.rotation_deg <= run.max_rotation_deg);
    }
}
