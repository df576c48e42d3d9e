//! Variational score distillation against an analytic Gaussian prior, with
//! the high-pass projected variant.
//!
//! The generator is the image `x_hat` itself, so `dz_t / dx_hat = alpha_t I`
//! and the fake score of a point-mass generator is available in closed form.
//! The prior is a stationary Gaussian: mean image `mu`, covariance diagonal in
//! the Fourier basis with per-bin variance `Sigma(u, v)` shared by all
//! channels. Its noisy marginal at step `t` is `N(alpha mu, alpha^2 Sigma +
//! beta^2 I)`, whose epsilon-prediction is an exact per-bin affine map.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::spectral::{make_mask_with, project_with, Band, Fft2d, FrequencyMask, MaskParams};

/// Below this noise coefficient epsilon-predictions are not formed.
pub const MIN_BETA: f64 = 1e-8;

/// Smallest denominator accepted by [`compute_vsd_weight`].
pub const MIN_WEIGHT_DENOMINATOR: f64 = 1e-12;

/// Losses above this abort [`run_distillation`].
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Variance-preserving diffusion coefficients for `t = 0..=T`.
///
/// Index 0 is the clean signal (`alpha = 1`, `beta = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alphas: Vec<f64>,
    betas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// DDPM linear schedule: `abar_t = prod_{s <= t} (1 - b_s)` with `b` linear
/// from `beta_start` to `beta_end`; `alpha_t = sqrt(abar_t)`,
/// `beta_t = sqrt(1 - abar_t)`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_start < beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut alphas = Vec::with_capacity(steps + 1);
    let mut betas = Vec::with_capacity(steps + 1);
    alphas.push(1.0);
    betas.push(0.0);
    let mut abar = 1.0;
    for s in 0..steps {
        let frac = if steps == 1 { 0.0 } else { s as f64 / (steps - 1) as f64 };
        let b = beta_start + (beta_end - beta_start) * frac;
        abar *= 1.0 - b;
        alphas.push(abar.sqrt());
        betas.push((1.0 - abar).sqrt());
    }
    Ok(DiffusionSchedule { alphas, betas })
}

impl DiffusionSchedule {
    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        make_schedule(p.steps, p.beta_start, p.beta_end)
    }

    /// `T`, the largest valid timestep.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Parameter(format!(
                "timestep {t} exceeds schedule length {}",
                self.steps()
            )));
        }
        Ok(())
    }

    fn beta_checked(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        let beta = self.betas[t];
        if beta < MIN_BETA {
            return Err(Error::Timestep { t, beta });
        }
        Ok(beta)
    }
}

/// `z_t = alpha_t x + beta_t eps`.
pub fn noisify(x: &ImagePlane, t: usize, eps: &ImagePlane, sched: &DiffusionSchedule) -> Result<ImagePlane> {
    x.check_same_shape(eps, "noisify")?;
    sched.check(t)?;
    let (a, b) = (sched.alpha(t), sched.beta(t));
    Ok(x.zip_map(eps, |x, e| a * x + b * e))
}

/// `x = (z_t - beta_t v) / alpha_t`.
pub fn one_step_denoise(z: &ImagePlane, v0_hat: &ImagePlane, t: usize, sched: &DiffusionSchedule) -> Result<ImagePlane> {
    z.check_same_shape(v0_hat, "one_step_denoise")?;
    sched.check(t)?;
    let (a, b) = (sched.alpha(t), sched.beta(t));
    Ok(z.zip_map(v0_hat, |z, v| (z - b * v) / a))
}

/// Gaussian prior with a mean image and per-bin (centered) variances.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryGaussianPrior {
    mean: ImagePlane,
    variance: FrequencyMask,
}

impl StationaryGaussianPrior {
    pub fn new(mean: ImagePlane, variance: FrequencyMask) -> Result<Self> {
        if variance.height() != mean.height() || variance.width() != mean.width() {
            return Err(Error::Shape(format!(
                "{}x{} variance field for a {}x{} mean",
                variance.height(),
                variance.width(),
                mean.height(),
                mean.width()
            )));
        }
        if variance.values().iter().any(|&v| v < 0.0) {
            return Err(Error::Parameter("prior variances must be non-negative".into()));
        }
        // An asymmetric field would make the prior score complex.
        let defect = variance.symmetry_defect();
        if defect > 1e-12 {
            return Err(Error::Parameter(format!(
                "prior variance field is not point-symmetric (defect {defect:e})"
            )));
        }
        Ok(Self { mean, variance })
    }

    /// `Sigma = 0`: all mass at `mean`.
    pub fn point_mass(mean: ImagePlane) -> Self {
        let variance = FrequencyMask::constant(mean.height(), mean.width(), 0.0);
        Self { mean, variance }
    }

    /// Variance `high` on bins where `band` is 1 and zero elsewhere.
    pub fn banded(mean: ImagePlane, band: &FrequencyMask, high: f64) -> Result<Self> {
        let values = band.values().iter().map(|&g| g * high).collect();
        Self::new(mean, FrequencyMask::new(band.height(), band.width(), values)?)
    }

    pub fn mean(&self) -> &ImagePlane {
        &self.mean
    }

    pub fn variance(&self) -> &FrequencyMask {
        &self.variance
    }
}

/// Multiplies every channel of `img` per bin by `gain(bin_index)`.
fn per_bin(fft: &Fft2d, img: &ImagePlane, gain: impl Fn(usize) -> f64) -> Result<ImagePlane> {
    let mut planes = Vec::with_capacity(img.channels());
    for ch in 0..img.channels() {
        let mut spec = fft.forward(&img.plane(ch));
        for (i, z) in spec.data.iter_mut().enumerate() {
            *z *= gain(i);
        }
        planes.push(fft.inverse(&spec)?);
    }
    ImagePlane::from_planes(img.height(), img.width(), &planes)
}

fn plan_for(img: &ImagePlane) -> Fft2d {
    Fft2d::new(img.height().max(1), img.width().max(1))
}

fn prior_eps_with(
    fft: &Fft2d,
    prior: &StationaryGaussianPrior,
    z: &ImagePlane,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<ImagePlane> {
    z.check_same_shape(&prior.mean, "prior_eps")?;
    let beta = sched.beta_checked(t)?;
    let alpha = sched.alpha(t);
    let resid = z.zip_map(&prior.mean, |z, m| z - alpha * m);
    let var = prior.variance.values();
    per_bin(fft, &resid, |i| beta / (alpha * alpha * var[i] + beta * beta))
}

/// Epsilon-prediction of the noisy prior marginal:
/// `beta (alpha^2 Sigma + beta^2)^-1 (z - alpha mu)` per Fourier bin.
pub fn prior_eps(prior: &StationaryGaussianPrior, z: &ImagePlane, t: usize, sched: &DiffusionSchedule) -> Result<ImagePlane> {
    prior_eps_with(&plan_for(z), prior, z, t, sched)
}

/// Epsilon-prediction of a point mass at `x_hat`: `(z - alpha x_hat) / beta`.
pub fn generator_eps(x_hat: &ImagePlane, z: &ImagePlane, t: usize, sched: &DiffusionSchedule) -> Result<ImagePlane> {
    x_hat.check_same_shape(z, "generator_eps")?;
    let beta = sched.beta_checked(t)?;
    let alpha = sched.alpha(t);
    Ok(z.zip_map(x_hat, |z, x| (z - alpha * x) / beta))
}

/// One sample `omega alpha_t (prior_eps - generator_eps)` at `z_t` built from
/// `eps`. Descending along it moves `x_hat` towards higher prior density.
pub fn vsd_gradient(
    x_hat: &ImagePlane,
    prior: &StationaryGaussianPrior,
    t: usize,
    eps: &ImagePlane,
    sched: &DiffusionSchedule,
    omega: f64,
) -> Result<ImagePlane> {
    let fft = plan_for(x_hat);
    let z = noisify(x_hat, t, eps, sched)?;
    let d = score_difference(&fft, x_hat, prior, &z, t, sched)?;
    Ok(d.scale(omega * sched.alpha(t)))
}

/// `prior_eps - generator_eps` at `z`, arranged as
/// `-alpha^2 Sigma / (beta (alpha^2 Sigma + beta^2)) (z - alpha mu) + (alpha / beta)(x_hat - mu)`
/// so that a prior matching the generator cancels exactly.
fn score_difference(
    fft: &Fft2d,
    x_hat: &ImagePlane,
    prior: &StationaryGaussianPrior,
    z: &ImagePlane,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<ImagePlane> {
    z.check_same_shape(&prior.mean, "prior_eps")?;
    x_hat.check_same_shape(z, "generator_eps")?;
    let beta = sched.beta_checked(t)?;
    let alpha = sched.alpha(t);
    let var = prior.variance.values();
    let mut d = if var.iter().all(|&v| v == 0.0) {
        ImagePlane::zeros(z.height(), z.width(), z.channels())
    } else {
        let resid = z.zip_map(&prior.mean, |z, m| z - alpha * m);
        per_bin(fft, &resid, |i| {
            let s = alpha * alpha * var[i];
            -s / (beta * (s + beta * beta))
        })?
    };
    d.axpy(alpha / beta, &x_hat.sub(&prior.mean)?);
    Ok(d)
}

/// [`vsd_gradient`] projected onto the high band of `mask`.
pub fn hf_vsd_update(
    x_hat: &ImagePlane,
    prior: &StationaryGaussianPrior,
    mask: &FrequencyMask,
    t: usize,
    eps: &ImagePlane,
    sched: &DiffusionSchedule,
    omega: f64,
) -> Result<ImagePlane> {
    let grad = vsd_gradient(x_hat, prior, t, eps, sched, omega)?;
    project_with(&plan_for(x_hat), &grad, mask, Band::High)
}

/// `1 / mean((x_hat - eps_pred)^2)`.
pub fn compute_vsd_weight(x_hat: &ImagePlane, eps_pred: &ImagePlane) -> Result<f64> {
    x_hat.check_same_shape(eps_pred, "compute_vsd_weight")?;
    let n = x_hat.data().len().max(1) as f64;
    let denominator = x_hat
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n;
    if denominator < MIN_WEIGHT_DENOMINATOR {
        return Err(Error::WeightOverflow { denominator });
    }
    Ok(1.0 / denominator)
}

/// Timestep weighting of the distillation gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaRule {
    Constant(f64),
    /// `omega = 1 / mean((x_hat - x0_prior)^2)`, with `x0_prior` the one-step
    /// denoised estimate from the prior's prediction.
    Adaptive,
    /// `omega(t) = beta_t / alpha_t^2`, which makes the pull of a point-mass
    /// prior independent of `t`.
    SnrNormalized,
}

impl Default for OmegaRule {
    fn default() -> Self {
        OmegaRule::Constant(1.0)
    }
}

impl OmegaRule {
    /// `omega(t)` for the rules that do not depend on the sample.
    pub fn at(&self, t: usize, sched: &DiffusionSchedule) -> Option<f64> {
        match *self {
            OmegaRule::Constant(c) => Some(c),
            OmegaRule::SnrNormalized => {
                let a = sched.alpha(t);
                Some(sched.beta(t) / (a * a))
            }
            OmegaRule::Adaptive => None,
        }
    }
}

impl FromStr for OmegaRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "adaptive" => Ok(OmegaRule::Adaptive),
            "snr" => Ok(OmegaRule::SnrNormalized),
            _ => {
                let c = s.strip_prefix("constant:").unwrap_or(s);
                c.parse::<f64>()
                    .map(OmegaRule::Constant)
                    .map_err(|_| Error::Parameter(format!("unknown omega rule {s:?}")))
            }
        }
    }
}

impl std::fmt::Display for OmegaRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OmegaRule::Constant(c) => write!(f, "{c}"),
            OmegaRule::Adaptive => write!(f, "adaptive"),
            OmegaRule::SnrNormalized => write!(f, "snr"),
        }
    }
}

/// Per-bin gain `mean_t omega(t) alpha_t^2 beta_t / (alpha_t^2 Sigma + beta_t^2)`
/// over integer `t` in `[t_min, t_max]`.
pub fn closed_form_gains(
    prior: &StationaryGaussianPrior,
    sched: &DiffusionSchedule,
    t_range: (usize, usize),
    omega: &OmegaRule,
) -> Result<Vec<f64>> {
    let (t_min, t_max) = t_range;
    if t_min > t_max || t_max > sched.steps() {
        return Err(Error::Parameter(format!(
            "bad timestep range [{t_min}, {t_max}] for T = {}",
            sched.steps()
        )));
    }
    let mut weights = Vec::with_capacity(t_max - t_min + 1);
    for t in t_min..=t_max {
        let beta = sched.beta_checked(t)?;
        let w = omega
            .at(t, sched)
            .ok_or_else(|| Error::Unsupported("the adaptive weight has no closed-form expectation".into()))?;
        weights.push((w, sched.alpha(t), beta));
    }
    let count = weights.len() as f64;
    Ok(prior
        .variance
        .values()
        .iter()
        .map(|&var| {
            weights
                .iter()
                .map(|&(w, a, b)| w * a * a * b / (a * a * var + b * b))
                .sum::<f64>()
                / count
        })
        .collect())
}

/// Expectation of [`vsd_gradient`] over `eps ~ N(0, I)` and `t` uniform on
/// the integers of `t_range`: the per-bin gains of [`closed_form_gains`]
/// applied to `x_hat - mu`.
pub fn closed_form_vsd_gradient(
    x_hat: &ImagePlane,
    prior: &StationaryGaussianPrior,
    sched: &DiffusionSchedule,
    t_range: (usize, usize),
    omega: &OmegaRule,
) -> Result<ImagePlane> {
    x_hat.check_same_shape(&prior.mean, "closed_form_vsd_gradient")?;
    let gains = closed_form_gains(prior, sched, t_range, omega)?;
    let diff = x_hat.sub(&prior.mean)?;
    per_bin(&plan_for(x_hat), &diff, |i| gains[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    DataOnly,
    NaiveVsd,
    HfVsd,
}

impl DistillMode {
    pub const ALL: [DistillMode; 3] = [DistillMode::DataOnly, DistillMode::NaiveVsd, DistillMode::HfVsd];

    pub fn as_str(self) -> &'static str {
        match self {
            DistillMode::DataOnly => "data_only",
            DistillMode::NaiveVsd => "naive_vsd",
            DistillMode::HfVsd => "hf_vsd",
        }
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "data" | "data_only" | "data-only" => Ok(DistillMode::DataOnly),
            "naive" | "naive_vsd" | "naive-vsd" => Ok(DistillMode::NaiveVsd),
            "hf" | "hf_vsd" | "hf-vsd" => Ok(DistillMode::HfVsd),
            other => Err(Error::Parameter(format!("unknown distillation mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub mask: MaskParams,
    /// When set, the mask is hardened to `{0, 1}` at this threshold.
    pub mask_threshold: Option<f64>,
    pub steps: usize,
    pub lr: f64,
    pub mode: DistillMode,
    pub omega: OmegaRule,
    pub schedule: ScheduleParams,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            t_min: 20,
            t_max: 980,
            mask: MaskParams::default(),
            mask_threshold: None,
            steps: 200,
            lr: 0.1,
            mode: DistillMode::HfVsd,
            omega: OmegaRule::default(),
            schedule: ScheduleParams::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Parameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.t_min >= self.t_max || self.t_max > self.schedule.steps {
            return Err(Error::Parameter(format!(
                "need 0 <= t_min < t_max <= {}, got [{}, {}]",
                self.schedule.steps, self.t_min, self.t_max
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.mask.validate()
    }

    /// Gains applied to the regularizer in `hf_vsd` mode.
    pub fn build_mask(&self, height: usize, width: usize) -> Result<FrequencyMask> {
        let soft = make_mask_with(height, width, self.mask)?;
        match self.mask_threshold {
            Some(t) => soft.gains().binarized(t),
            None => Ok(soft.gains().clone()),
        }
    }
}

/// One optimizer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// `mean((x_hat - y)^2)`.
    pub data_loss: f64,
    /// RMS of the regularizer gradient actually applied.
    pub reg_norm: f64,
    /// RMS of the low band of `x_hat - reference`.
    pub lowband_err: f64,
    /// Mean square of the high band of `x_hat`.
    pub highband_energy: f64,
}

/// Final estimate and per-iteration trace of [`run_distillation`].
#[derive(Debug, Clone, PartialEq)]
pub struct DistillState {
    pub x_hat: ImagePlane,
    pub iteration: usize,
    pub trace: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "iter,data_loss,reg_norm,lowband_err,highband_energy";

pub fn write_trace_csv(trace: &[TraceRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in trace {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e}",
            r.iter, r.data_loss, r.reg_norm, r.lowband_err, r.highband_energy
        )?;
    }
    Ok(())
}

pub fn save_trace_csv(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_trace_csv(trace, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn standard_normal_image(like: &ImagePlane, rng: &mut ChaCha8Rng) -> ImagePlane {
    let data = (0..like.data().len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    ImagePlane::new(like.height(), like.width(), like.channels(), data).expect("finite normal draws")
}

/// Low band used for error reporting: bins where the soft mask is below 0.5.
pub fn lowband_mask(cfg: &DistillConfig, height: usize, width: usize) -> Result<FrequencyMask> {
    let soft = make_mask_with(height, width, cfg.mask)?;
    Ok(soft.gains().binarized(0.5)?.complement())
}

/// Gradient descent on `0.5 |x_hat - y|^2 + lambda R(x_hat)` from `x_hat = 0`.
///
/// `R` is absent (`data_only`), the plain VSD term (`naive_vsd`) or its
/// high-pass projection (`hf_vsd`). Each iteration draws one `t` uniformly
/// from `[t_min, t_max]` and one Gaussian `eps`. `reference` (for example the
/// ground truth) is what the low-band error is measured against; the target
/// itself is used when absent.
pub fn run_distillation(
    target: &ImagePlane,
    prior: &StationaryGaussianPrior,
    cfg: &DistillConfig,
    reference: Option<&ImagePlane>,
) -> Result<DistillState> {
    run_distillation_observed(target, prior, cfg, reference, |_, _| {})
}

/// [`run_distillation`] calling `observe(iteration, x_hat)` after every step.
pub fn run_distillation_observed(
    target: &ImagePlane,
    prior: &StationaryGaussianPrior,
    cfg: &DistillConfig,
    reference: Option<&ImagePlane>,
    mut observe: impl FnMut(usize, &ImagePlane),
) -> Result<DistillState> {
    cfg.validate()?;
    target.check_same_shape(&prior.mean, "run_distillation prior")?;
    let reference = reference.unwrap_or(target);
    target.check_same_shape(reference, "run_distillation reference")?;

    let (h, w) = (target.height(), target.width());
    let fft = plan_for(target);
    let sched = DiffusionSchedule::from_params(&cfg.schedule)?;
    let hf_mask = cfg.build_mask(h, w)?;
    let low = lowband_mask(cfg, h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut x_hat = ImagePlane::zeros(h, w, target.channels());
    let mut trace = Vec::with_capacity(cfg.steps);
    for iter in 0..cfg.steps {
        let data_grad = x_hat.sub(target)?;
        let data_loss = data_grad.data().iter().map(|v| v * v).sum::<f64>() / data_grad.data().len().max(1) as f64;

        let reg = if cfg.mode == DistillMode::DataOnly || cfg.lambda == 0.0 {
            None
        } else {
            let t = rng.random_range(cfg.t_min..=cfg.t_max);
            let eps = standard_normal_image(&x_hat, &mut rng);
            let z = noisify(&x_hat, t, &eps, &sched)?;
            let omega = match cfg.omega.at(t, &sched) {
                Some(o) => o,
                None => {
                    let p = prior_eps_with(&fft, prior, &z, t, &sched)?;
                    compute_vsd_weight(&x_hat, &one_step_denoise(&z, &p, t, &sched)?)?
                }
            };
            let grad = score_difference(&fft, &x_hat, prior, &z, t, &sched)?.scale(omega * sched.alpha(t));
            Some(match cfg.mode {
                DistillMode::HfVsd => project_with(&fft, &grad, &hf_mask, Band::High)?,
                _ => grad,
            })
        };

        let mut step = data_grad;
        let mut reg_norm = 0.0;
        if let Some(reg) = &reg {
            reg_norm = reg.rms();
            step.axpy(cfg.lambda, reg);
        }
        x_hat.axpy(-cfg.lr, &step);

        let err = x_hat.sub(reference)?;
        let lowband_err = project_with(&fft, &err, &low, Band::High)?.rms();
        let highband_energy = project_with(&fft, &x_hat, &low, Band::Low)?.rms().powi(2);
        let row = TraceRow {
            iter,
            data_loss,
            reg_norm,
            lowband_err,
            highband_energy,
        };
        let bad = !(data_loss.is_finite() && data_loss <= DIVERGENCE_LOSS)
            || x_hat.data().iter().any(|v| !v.is_finite());
        trace.push(row);
        if bad {
            return Err(Error::Divergence {
                iteration: iter,
                loss: data_loss,
                trace,
            });
        }
        observe(iter, &x_hat);
    }
    Ok(DistillState {
        x_hat,
        iteration: cfg.steps,
        trace,
    })
}
