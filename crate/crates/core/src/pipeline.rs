//! End-to-end orchestration: paired sample synthesis, the high-frequency
//! distillation ablation and batch dataset generation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{reconstruct, FusionConfig};
use crate::geometry::{load_trajectory, synth_trajectory_with, warp, Burst, Trajectory, TremorParams};
use crate::image::ImagePlane;
use crate::io::{read_image, save_burst, write_json, write_pfm};
use crate::metrics::band_error;
use crate::raw_sensor::{
    add_poisson_gaussian, mosaic, space_to_depth_decimate, CfaPattern, NoiseParams, DEFAULT_BIT_DEPTH,
};
use crate::score_distill::{run_distillation_observed, DistillConfig, DistillMode, StationaryGaussianPrior, TraceRow};
use crate::spectral::{project, Band};

/// SplitMix64 mix of `seed` and `index`, for per-frame and per-scene seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_frames: usize,
    pub sr_factor: usize,
    /// Side of the square ground-truth patch used by dataset generation.
    pub patch: usize,
    pub tremor: TremorParams,
    /// Use this trajectory file instead of synthesizing one.
    pub trajectory_path: Option<PathBuf>,
    /// Noise model; its seed is replaced by a per-frame seed derived from
    /// `seed`.
    pub noise: NoiseParams,
    pub cfa: CfaPattern,
    pub bit_depth: u32,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_frames: 11,
            sr_factor: 4,
            patch: 256,
            tremor: TremorParams::default(),
            trajectory_path: None,
            noise: NoiseParams::default(),
            cfa: CfaPattern::Rggb,
            bit_depth: DEFAULT_BIT_DEPTH,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(Error::Parameter("n_frames must be at least 1".into()));
        }
        if self.sr_factor == 0 {
            return Err(Error::Parameter("sr_factor must be at least 1".into()));
        }
        if self.patch == 0 || self.patch % (2 * self.sr_factor) != 0 {
            return Err(Error::Parameter(format!(
                "patch {} is not a positive multiple of 2*sr_factor = {}",
                self.patch,
                2 * self.sr_factor
            )));
        }
        self.tremor.validate()?;
        self.noise.validate()
    }

    fn trajectory_for(&self, height: usize, width: usize) -> Result<Trajectory> {
        match &self.trajectory_path {
            Some(p) => {
                let t = load_trajectory(p)?;
                if t.len() != self.n_frames {
                    return Err(Error::Shape(format!(
                        "trajectory has {} frames, n_frames is {}",
                        t.len(),
                        self.n_frames
                    )));
                }
                Ok(t)
            }
            None => synth_trajectory_with(
                self.n_frames,
                &self.tremor,
                (width as f64 / 2.0, height as f64 / 2.0),
                self.seed,
            ),
        }
    }
}

/// Ground truth and the burst simulated from it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub gt: ImagePlane,
    pub burst: Burst,
    pub config: SimulationConfig,
}

/// Simulates a burst from `gt` with the configured (or loaded) trajectory.
pub fn simulate_pair(gt: &ImagePlane, cfg: &SimulationConfig) -> Result<PairedSample> {
    let traj = cfg.trajectory_for(gt.height(), gt.width())?;
    simulate_with_trajectory(gt, &traj, cfg)
}

/// Simulates with an explicit trajectory in scene pixel coordinates.
///
/// Per frame: warp the scene, mosaic, Bayer-preserving decimation, then
/// noise. Frame 0 is not resampled.
pub fn simulate_with_trajectory(gt: &ImagePlane, traj: &Trajectory, cfg: &SimulationConfig) -> Result<PairedSample> {
    if cfg.n_frames == 0 || cfg.sr_factor == 0 {
        return Err(Error::Parameter("n_frames and sr_factor must be at least 1".into()));
    }
    cfg.noise.validate()?;
    if gt.channels() != 3 {
        return Err(Error::Shape(format!("ground truth needs 3 channels, got {}", gt.channels())));
    }
    let m = 2 * cfg.sr_factor;
    if gt.height() % m != 0 || gt.width() % m != 0 || gt.height() == 0 || gt.width() == 0 {
        return Err(Error::Dimension(format!(
            "{}x{} ground truth is not divisible by 2*sr_factor = {m}",
            gt.height(),
            gt.width()
        )));
    }
    if traj.len() != cfg.n_frames {
        return Err(Error::Shape(format!(
            "trajectory has {} frames, n_frames is {}",
            traj.len(),
            cfg.n_frames
        )));
    }
    let mut frames = Vec::with_capacity(cfg.n_frames);
    for (i, h) in traj.frames().iter().enumerate() {
        let warped = if i == 0 { gt.clone() } else { warp(gt, h)?.image };
        let clipped = warped.map(|v| v.clamp(0.0, 1.0));
        let raw = space_to_depth_decimate(&mosaic(&clipped, cfg.cfa)?, cfg.sr_factor)?.with_bit_depth(cfg.bit_depth)?;
        let noisy = if cfg.noise.is_zero() {
            raw
        } else {
            add_poisson_gaussian(&raw, &cfg.noise.with_seed(derive_seed(cfg.seed, i as u64)))?
        };
        frames.push(noisy);
    }
    let burst = Burst::new(frames, traj.clone())?
        .with_meta("seed", cfg.seed)
        .with_meta("sr_factor", cfg.sr_factor);
    Ok(PairedSample {
        gt: gt.clone(),
        burst,
        config: cfg.clone(),
    })
}

/// Writes `gt.pfm`, `burst/` and `config.json` into `dir`.
pub fn save_sample(dir: impl AsRef<Path>, sample: &PairedSample) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_pfm(dir.join("gt.pfm"), &sample.gt)?;
    save_burst(dir.join("burst"), &sample.burst)?;
    write_json(dir.join("config.json"), &sample.config)
}

/// Settings of the prior and fusion used by [`run_ablation_hf`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Constant added to the ground truth to form the prior mean.
    pub prior_shift: f64,
    /// Prior variance on high-band bins; low-band bins get zero.
    pub prior_high_variance: f64,
    /// Slack in the ordering test.
    pub epsilon: f64,
    pub fusion: FusionConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            prior_shift: 0.1,
            prior_high_variance: 0.01,
            epsilon: 1e-8,
            fusion: FusionConfig {
                use_given_trajectory: true,
                ..FusionConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: DistillMode,
    pub lowband_rmse: f64,
    pub highband_rmse: f64,
    pub final_data_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub modes: Vec<ModeResult>,
    pub epsilon: f64,
    /// `lowband(hf) <= lowband(data) + eps < lowband(naive)`.
    pub ordering_holds: bool,
    /// Largest per-step deviation between the low bands of the `hf_vsd` and
    /// `data_only` iterates.
    pub hf_lowband_max_step_deviation: f64,
    /// Low-band RMSE of the fused target against the ground truth.
    pub target_lowband_rmse: f64,
    pub simulation: SimulationConfig,
    pub distill: DistillConfig,
    pub ablation: AblationConfig,
}

impl AblationReport {
    pub fn mode(&self, mode: DistillMode) -> &ModeResult {
        self.modes
            .iter()
            .find(|m| m.mode == mode)
            .expect("report holds every mode")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,lowband_rmse,highband_rmse,final_data_loss\n");
        for m in &self.modes {
            out.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                m.mode, m.lowband_rmse, m.highband_rmse, m.final_data_loss
            ));
        }
        out
    }
}

/// Everything [`run_ablation_hf`] computed, beyond the serializable report.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub report: AblationReport,
    pub sample: PairedSample,
    /// Fused image used as the data target.
    pub target: ImagePlane,
    pub prior: StationaryGaussianPrior,
    /// Final iterate and trace per mode, in [`DistillMode::ALL`] order.
    pub finals: Vec<(DistillMode, ImagePlane, Vec<TraceRow>)>,
}

/// Simulates a burst from `scene`, fuses it into a data target, and runs the
/// distillation loop in every mode against a constant-shifted prior whose
/// low band is deterministic.
///
/// `distill.mask_threshold` defaults to 0.5 when unset so the regularizer
/// mask is binary.
pub fn run_ablation_hf(
    scene: &ImagePlane,
    sim: &SimulationConfig,
    distill: &DistillConfig,
    ablation: &AblationConfig,
) -> Result<AblationOutcome> {
    let sample = simulate_pair(scene, sim)?;
    run_ablation_on(sample, distill, ablation)
}

/// [`run_ablation_hf`] for an already simulated sample.
pub fn run_ablation_on(
    sample: PairedSample,
    distill: &DistillConfig,
    ablation: &AblationConfig,
) -> Result<AblationOutcome> {
    let fusion = FusionConfig {
        sr_factor: sample.config.sr_factor,
        ..ablation.fusion
    };
    let target = reconstruct(&sample.burst, &fusion)?.image;
    let gt = &sample.gt;
    let (h, w) = (gt.height(), gt.width());

    let mut base = distill.clone();
    base.mask_threshold.get_or_insert(0.5);
    base.validate()?;
    let mask = base.build_mask(h, w)?;
    let prior = StationaryGaussianPrior::banded(
        gt.map(|v| v + ablation.prior_shift),
        &mask,
        ablation.prior_high_variance,
    )?;

    let mut data_low: Vec<ImagePlane> = Vec::new();
    let mut deviation: f64 = 0.0;
    let mut finals = Vec::new();
    let mut modes = Vec::new();
    for mode in DistillMode::ALL {
        let cfg = DistillConfig { mode, ..base.clone() };
        let mut step_error = None;
        let state = run_distillation_observed(&target, &prior, &cfg, Some(gt), |i, x| {
            if step_error.is_some() {
                return;
            }
            match (mode, project(x, &mask, Band::Low)) {
                (DistillMode::DataOnly, Ok(p)) => data_low.push(p),
                (DistillMode::HfVsd, Ok(p)) => match data_low.get(i).map(|d| p.sub(d)) {
                    Some(Ok(d)) => deviation = deviation.max(d.max_abs()),
                    Some(Err(e)) => step_error = Some(e),
                    None => deviation = f64::INFINITY,
                },
                (_, Ok(_)) => {}
                (_, Err(e)) => step_error = Some(e),
            }
        })?;
        if let Some(e) = step_error {
            return Err(e);
        }
        let (lowband_rmse, highband_rmse) = band_error(&state.x_hat, gt, &mask)?;
        modes.push(ModeResult {
            mode,
            lowband_rmse,
            highband_rmse,
            final_data_loss: state.trace.last().map_or(0.0, |r| r.data_loss),
        });
        finals.push((mode, state.x_hat, state.trace));
    }

    let (target_lowband_rmse, _) = band_error(&target, gt, &mask)?;
    let low = |m: DistillMode| modes.iter().find(|r| r.mode == m).map(|r| r.lowband_rmse).unwrap_or(f64::NAN);
    let eps = ablation.epsilon;
    let ordering_holds = low(DistillMode::HfVsd) <= low(DistillMode::DataOnly) + eps
        && low(DistillMode::DataOnly) + eps < low(DistillMode::NaiveVsd);
    let report = AblationReport {
        modes,
        epsilon: eps,
        ordering_holds,
        hf_lowband_max_step_deviation: deviation,
        target_lowband_rmse,
        simulation: sample.config.clone(),
        distill: base,
        ablation: *ablation,
    };
    Ok(AblationOutcome {
        report,
        sample,
        target,
        prior,
        finals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.90,
            val: 0.05,
            test: 0.05,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::Parameter("split ratios must be non-negative".into()));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` counts: validation and test are floored and the
    /// remainder goes to training.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
        let val = floor(self.val).min(n);
        let test = floor(self.test).min(n - val);
        (n - val - test, val, test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Sample directory relative to the output directory.
    pub dir: String,
    /// Source file name within the source directory.
    pub source: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub config: SimulationConfig,
    pub entries: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

/// Center crop of `side x side`, or `None` when the image is smaller.
fn center_crop(img: &ImagePlane, side: usize) -> Option<ImagePlane> {
    if img.height() < side || img.width() < side {
        return None;
    }
    img.crop((img.height() - side) / 2, (img.width() - side) / 2, side, side).ok()
}

/// Simulates a paired sample for every `.pfm`/`.png` in `src_dir` and writes
/// them with `manifest.json` into `out_dir`.
///
/// Inputs are visited in file-name order; unreadable or too small inputs are
/// skipped with a warning. Splits come from a shuffle seeded by `seed`, and
/// scene `i` of the listing is simulated with `derive_seed(seed, i)`.
pub fn dataset_batch(
    src_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    cfg: &SimulationConfig,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Manifest> {
    let (src_dir, out_dir) = (src_dir.as_ref(), out_dir.as_ref());
    cfg.validate()?;
    ratios.validate()?;
    let mut sources: Vec<PathBuf> = fs::read_dir(src_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("pfm") || e.eq_ignore_ascii_case("png"))
        })
        .collect();
    sources.sort();
    fs::create_dir_all(out_dir)?;

    let mut warnings = Vec::new();
    let mut done = Vec::new();
    for (i, path) in sources.iter().enumerate() {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let img = match read_image(path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                warnings.push(format!("{name}: {e}"));
                continue;
            }
        };
        let Some(patch) = center_crop(&img, cfg.patch) else {
            warnings.push(format!(
                "{name}: {}x{} is smaller than the {} patch",
                img.height(),
                img.width(),
                cfg.patch
            ));
            continue;
        };
        let scene_seed = derive_seed(seed, i as u64);
        let scene_cfg = SimulationConfig {
            seed: scene_seed,
            ..cfg.clone()
        };
        let sample = simulate_pair(&patch, &scene_cfg)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
        let dir = format!("{i:04}_{stem}");
        save_sample(out_dir.join(&dir), &sample)?;
        done.push((dir, name, scene_seed));
    }

    let (n_train, n_val, _) = ratios.counts(done.len());
    let mut order: Vec<usize> = (0..done.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = vec![Split::Test; done.len()];
    for (rank, &idx) in order.iter().enumerate() {
        split[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let entries = done
        .into_iter()
        .zip(split)
        .map(|((dir, source, seed), split)| ManifestEntry {
            dir,
            source,
            split,
            seed,
        })
        .collect();
    let manifest = Manifest {
        seed,
        ratios,
        config: cfg.clone(),
        entries,
        warnings,
    };
    write_json(out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
