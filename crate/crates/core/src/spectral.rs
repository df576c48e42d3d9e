//! Unitary 2D Fourier transforms, the radial high-pass gain `h(u, v)` and the
//! frequency-domain band projectors built from it.
//!
//! Spectra are stored *centered*: the DC coefficient of an `h x w` grid sits
//! at row `h / 2`, column `w / 2`, and centered index `k` on an axis of
//! length `n` carries the integer frequency `k - n / 2`. Both directions are
//! scaled by `1 / sqrt(h w)`, so Parseval holds without extra factors.

use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;

/// Relative bound on the imaginary part an inverse transform may leave behind
/// for a real-valued result.
pub const IMAGINARY_RESIDUE_TOL: f64 = 1e-10;

/// Signed integer frequency of centered index `k` on an axis of length `n`.
#[inline]
pub fn centered_frequency(k: usize, n: usize) -> i64 {
    k as i64 - (n / 2) as i64
}

/// Natural (FFT output) index of centered index `k`.
#[inline]
fn natural_index(k: usize, n: usize) -> usize {
    (k + n - n / 2) % n
}

/// Centered complex spectrum of one real channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.width + c]
    }

    /// Coefficient at signed frequency `(v, u)` (row, column), wrapping.
    pub fn at_frequency(&self, v: i64, u: i64) -> Complex64 {
        let r = (v + (self.height / 2) as i64).rem_euclid(self.height as i64) as usize;
        let c = (u + (self.width / 2) as i64).rem_euclid(self.width as i64) as usize;
        self.get(r, c)
    }

    /// Largest `|X(f) - conj(X(-f))|`; zero for spectra of real signals.
    pub fn hermitian_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.height {
            for c in 0..self.width {
                let v = centered_frequency(r, self.height);
                let u = centered_frequency(c, self.width);
                let mirror = self.at_frequency(-v, -u);
                worst = worst.max((self.get(r, c) - mirror.conj()).norm());
            }
        }
        worst
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// Cached row/column plans for a fixed grid size.
#[derive(Clone)]
pub struct Fft2d {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2d")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl Fft2d {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "empty FFT grid");
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for chunk in buf.chunks_exact_mut(w) {
            row.process(chunk);
        }
        let mut column = vec![Complex64::default(); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = buf[r * w + c];
            }
            col.process(&mut column);
            for r in 0..h {
                buf[r * w + c] = column[r];
            }
        }
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for z in buf.iter_mut() {
            *z *= scale;
        }
    }

    /// Centered unitary forward transform of a real `height x width` plane.
    pub fn forward(&self, plane: &[f64]) -> Spectrum {
        assert_eq!(plane.len(), self.height * self.width, "plane size mismatch");
        let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        Spectrum {
            height: self.height,
            width: self.width,
            data: self.to_centered(&buf),
        }
    }

    /// Centered unitary forward transform of a complex plane.
    pub fn forward_complex(&self, plane: &[Complex64]) -> Spectrum {
        assert_eq!(plane.len(), self.height * self.width, "plane size mismatch");
        let mut buf = plane.to_vec();
        self.transform(&mut buf, false);
        Spectrum {
            height: self.height,
            width: self.width,
            data: self.to_centered(&buf),
        }
    }

    /// Inverse transform without discarding the imaginary part.
    pub fn inverse_complex(&self, spectrum: &Spectrum) -> Vec<Complex64> {
        assert!(
            spectrum.height == self.height && spectrum.width == self.width,
            "spectrum size mismatch"
        );
        let mut buf = self.from_centered(&spectrum.data);
        self.transform(&mut buf, true);
        buf
    }

    /// Inverse transform to a real plane; fails if the imaginary residue
    /// exceeds [`IMAGINARY_RESIDUE_TOL`] relative to the signal scale.
    pub fn inverse(&self, spectrum: &Spectrum) -> Result<Vec<f64>> {
        let buf = self.inverse_complex(spectrum);
        let scale = buf.iter().fold(1.0f64, |m, z| m.max(z.re.abs()));
        let residue = buf.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
        if residue > IMAGINARY_RESIDUE_TOL * scale {
            return Err(Error::NonHermitian { residue });
        }
        Ok(buf.into_iter().map(|z| z.re).collect())
    }

    fn to_centered(&self, natural: &[Complex64]) -> Vec<Complex64> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![Complex64::default(); h * w];
        for r in 0..h {
            let nr = natural_index(r, h);
            for c in 0..w {
                out[r * w + c] = natural[nr * w + natural_index(c, w)];
            }
        }
        out
    }

    fn from_centered(&self, centered: &[Complex64]) -> Vec<Complex64> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![Complex64::default(); h * w];
        for r in 0..h {
            let nr = natural_index(r, h);
            for c in 0..w {
                out[nr * w + natural_index(c, w)] = centered[r * w + c];
            }
        }
        out
    }
}

/// Centered unitary 2D DFT of one channel of `img`.
pub fn fft2(img: &ImagePlane, channel: usize) -> Spectrum {
    Fft2d::new(img.height(), img.width()).forward(&img.plane(channel))
}

/// Inverse of [`fft2`], returning a one-channel image.
pub fn ifft2(spectrum: &Spectrum) -> Result<ImagePlane> {
    let plane = Fft2d::new(spectrum.height, spectrum.width).inverse(spectrum)?;
    ImagePlane::new(spectrum.height, spectrum.width, 1, plane)
}

/// How the normalizing radius `R` of the radial mask is derived from the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadiusRule {
    /// `R = min(h, w) / 4`: half of the Nyquist frequency of the shorter axis.
    #[default]
    HalfNyquistMin,
    /// `R = max(h, w) / 4`.
    HalfNyquistMax,
    /// `R_u = w / 4` horizontally and `R_v = h / 4` vertically.
    PerAxis,
    /// `R = min(h, w) / 2`, i.e. the Nyquist frequency itself.
    NyquistMin,
}

impl RadiusRule {
    /// `(R_u, R_v)` for an `h x w` grid.
    pub fn radii(self, height: usize, width: usize) -> (f64, f64) {
        let (h, w) = (height as f64, width as f64);
        match self {
            RadiusRule::HalfNyquistMin => (h.min(w) / 4.0, h.min(w) / 4.0),
            RadiusRule::HalfNyquistMax => (h.max(w) / 4.0, h.max(w) / 4.0),
            RadiusRule::PerAxis => (w / 4.0, h / 4.0),
            RadiusRule::NyquistMin => (h.min(w) / 2.0, h.min(w) / 2.0),
        }
    }
}

impl FromStr for RadiusRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "half-nyquist-min" | "min" => Ok(RadiusRule::HalfNyquistMin),
            "half-nyquist-max" | "max" => Ok(RadiusRule::HalfNyquistMax),
            "per-axis" => Ok(RadiusRule::PerAxis),
            "nyquist-min" => Ok(RadiusRule::NyquistMin),
            other => Err(Error::Parameter(format!("unknown radius rule {other:?}"))),
        }
    }
}

/// Parameters of `h(u,v) = clip(((a u / R)^2 + (a v / R)^2)^g + b, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub radius: RadiusRule,
}

impl Default for MaskParams {
    /// The training configuration: `alpha = 0.8`, `beta = 0.2`, `gamma = 4`.
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 0.2,
            gamma: 4.0,
            radius: RadiusRule::default(),
        }
    }
}

impl MaskParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            radius: RadiusRule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Parameter(format!(
                "mask exponent gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Parameter(format!(
                "mask bias beta must be non-negative, got {}",
                self.beta
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Parameter("mask alpha must be finite".into()));
        }
        Ok(())
    }

    /// Gain at signed frequency `(u, v)` given the radii.
    pub fn gain(&self, u: f64, v: f64, radius_u: f64, radius_v: f64) -> f64 {
        let x = self.alpha * u / radius_u;
        let y = self.alpha * v / radius_v;
        ((x * x + y * y).powf(self.gamma) + self.beta).clamp(0.0, 1.0)
    }
}

/// Real per-bin gains on a centered frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FrequencyMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} gains, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("mask gains must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, gain: f64) -> Self {
        Self {
            height,
            width,
            values: vec![gain; height * width],
        }
    }

    /// Builds gains from a function of signed frequency `(v, u)`.
    pub fn from_frequency_fn(height: usize, width: usize, f: impl Fn(i64, i64) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            let v = centered_frequency(r, height);
            for c in 0..width {
                values.push(f(v, centered_frequency(c, width)));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    /// Gain at signed frequency `(v, u)`.
    pub fn at_frequency(&self, v: i64, u: i64) -> f64 {
        let r = (v + (self.height / 2) as i64).rem_euclid(self.height as i64) as usize;
        let c = (u + (self.width / 2) as i64).rem_euclid(self.width as i64) as usize;
        self.get(r, c)
    }

    /// `1 - h`, the gains of the complementary (low-band) projector.
    pub fn complement(&self) -> FrequencyMask {
        FrequencyMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| 1.0 - v).collect(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Largest `|h(f) - h(-f)|` over bins whose mirror exists on the grid.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.height {
            let v = centered_frequency(r, self.height);
            for c in 0..self.width {
                let u = centered_frequency(c, self.width);
                let mr = (self.height / 2) as i64 - v;
                let mc = (self.width / 2) as i64 - u;
                if mr < 0 || mc < 0 || mr >= self.height as i64 || mc >= self.width as i64 {
                    continue;
                }
                worst = worst.max((self.get(r, c) - self.get(mr as usize, mc as usize)).abs());
            }
        }
        worst
    }

    fn check_grid(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::Shape(format!(
                "{}x{} mask applied to {height}x{width} grid",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Multiplies a centered spectrum bin by bin.
    pub fn apply(&self, spectrum: &mut Spectrum) -> Result<()> {
        self.check_grid(spectrum.height, spectrum.width)?;
        for (z, &g) in spectrum.data.iter_mut().zip(&self.values) {
            *z *= g;
        }
        Ok(())
    }

    /// Pointwise `g >= threshold` as `{0, 1}` gains.
    pub fn binarized(&self, threshold: f64) -> Result<FrequencyMask> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Parameter(format!(
                "binarization threshold must lie in (0, 1), got {threshold}"
            )));
        }
        Ok(FrequencyMask {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
        })
    }

    pub fn to_image(&self) -> ImagePlane {
        ImagePlane::new(self.height, self.width, 1, self.values.clone())
            .expect("finite gains form a valid plane")
    }
}

/// The radial high-pass gain together with the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialMask {
    pub params: MaskParams,
    /// Set when the gains were hardened by [`binary_mask_from`].
    pub threshold: Option<f64>,
    gains: FrequencyMask,
}

impl RadialMask {
    pub fn gains(&self) -> &FrequencyMask {
        &self.gains
    }

    pub fn height(&self) -> usize {
        self.gains.height
    }

    pub fn width(&self) -> usize {
        self.gains.width
    }

    /// `(R_u, R_v)` used for this grid.
    pub fn radii(&self) -> (f64, f64) {
        self.params.radius.radii(self.height(), self.width())
    }
}

impl AsRef<FrequencyMask> for RadialMask {
    fn as_ref(&self) -> &FrequencyMask {
        &self.gains
    }
}

impl AsRef<FrequencyMask> for FrequencyMask {
    fn as_ref(&self) -> &FrequencyMask {
        self
    }
}

/// Radial mask with the default radius rule.
pub fn make_mask(height: usize, width: usize, alpha: f64, beta: f64, gamma: f64) -> Result<RadialMask> {
    make_mask_with(height, width, MaskParams::new(alpha, beta, gamma))
}

pub fn make_mask_with(height: usize, width: usize, params: MaskParams) -> Result<RadialMask> {
    params.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::Dimension("mask grid must be non-empty".into()));
    }
    let (ru, rv) = params.radius.radii(height, width);
    let gains = FrequencyMask::from_frequency_fn(height, width, |v, u| {
        params.gain(u as f64, v as f64, ru, rv)
    });
    Ok(RadialMask {
        params,
        threshold: None,
        gains,
    })
}

/// Hard-projection analogue of a soft mask: gain 1 where `h >= threshold`.
pub fn binary_mask_from(mask: &RadialMask, threshold: f64) -> Result<RadialMask> {
    Ok(RadialMask {
        params: mask.params,
        threshold: Some(threshold),
        gains: mask.gains.binarized(threshold)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    /// Gains `h`.
    High,
    /// Gains `1 - h`.
    Low,
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(Band::High),
            "low" => Ok(Band::Low),
            other => Err(Error::Parameter(format!("unknown band {other:?}"))),
        }
    }
}

/// Applies `F^-1(g . F(x))` channel by channel, with `g = h` for the high
/// band and `g = 1 - h` for the low band.
pub fn project(img: &ImagePlane, mask: impl AsRef<FrequencyMask>, band: Band) -> Result<ImagePlane> {
    let fft = Fft2d::new(img.height().max(1), img.width().max(1));
    project_with(&fft, img, mask.as_ref(), band)
}

/// [`project`] reusing cached FFT plans.
pub fn project_with(
    fft: &Fft2d,
    img: &ImagePlane,
    mask: &FrequencyMask,
    band: Band,
) -> Result<ImagePlane> {
    mask.check_grid(img.height(), img.width())?;
    if fft.height != img.height() || fft.width != img.width() {
        return Err(Error::Shape("FFT plan does not match image grid".into()));
    }
    let mut planes = Vec::with_capacity(img.channels());
    for ch in 0..img.channels() {
        let mut spec = fft.forward(&img.plane(ch));
        match band {
            Band::High => {
                for (z, &g) in spec.data.iter_mut().zip(&mask.values) {
                    *z *= g;
                }
            }
            Band::Low => {
                for (z, &g) in spec.data.iter_mut().zip(&mask.values) {
                    *z *= 1.0 - g;
                }
            }
        }
        planes.push(fft.inverse(&spec)?);
    }
    ImagePlane::from_planes(img.height(), img.width(), &planes)
}

/// `ln(1 + |F(x)|)` on the centered grid of a single-channel image.
pub fn log_spectrum(img: &ImagePlane) -> Result<ImagePlane> {
    if img.channels() != 1 {
        return Err(Error::Shape(format!(
            "log spectrum needs a single channel, got {}",
            img.channels()
        )));
    }
    let spec = fft2(img, 0);
    let data = spec.data.iter().map(|z| z.norm().ln_1p()).collect();
    ImagePlane::new(img.height(), img.width(), 1, data)
}

/// Fraction of spectral energy (summed over channels) in bins where
/// `mask >= 0.5`.
pub fn band_energy_fraction(img: &ImagePlane, mask: &FrequencyMask) -> Result<f64> {
    mask.check_grid(img.height(), img.width())?;
    let fft = Fft2d::new(img.height(), img.width());
    let (mut inside, mut total) = (0.0, 0.0);
    for ch in 0..img.channels() {
        let spec = fft.forward(&img.plane(ch));
        for (z, &g) in spec.data.iter().zip(&mask.values) {
            let e = z.norm_sqr();
            total += e;
            if g >= 0.5 {
                inside += e;
            }
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_image(h: usize, w: usize, ch: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::from_fn(h, w, ch, |_, _, _| rng.random::<f64>())
    }

    /// Direct O(N^2) unitary DFT evaluated at signed frequency (v, u).
    fn dense_dft(img: &ImagePlane, v: i64, u: i64) -> Complex64 {
        let (h, w) = (img.height() as f64, img.width() as f64);
        let mut acc = Complex64::default();
        for r in 0..img.height() {
            for c in 0..img.width() {
                let phase = -2.0 * PI * (v as f64 * r as f64 / h + u as f64 * c as f64 / w);
                acc += Complex64::from_polar(img.get(r, c, 0), phase);
            }
        }
        acc / (h * w).sqrt()
    }

    #[test]
    fn fft_matches_dense_dft_on_odd_grid() {
        let img = random_image(5, 7, 1, 1);
        let spec = fft2(&img, 0);
        assert_eq!(spec.get(2, 3), spec.at_frequency(0, 0));
        for r in 0..5 {
            for c in 0..7 {
                let v = centered_frequency(r, 5);
                let u = centered_frequency(c, 7);
                assert!((spec.get(r, c) - dense_dft(&img, v, u)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let mut img = ImagePlane::zeros(8, 8, 1);
        img.set(0, 0, 0, 1.0);
        let spec = fft2(&img, 0);
        for z in &spec.data {
            assert!((z.norm() - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let img = random_image(16, 16, 1, 2);
        let spec = fft2(&img, 0);
        let back = ifft2(&spec).unwrap();
        let err = back.sub(&img).unwrap().max_abs();
        assert!(err < 1e-12, "round trip error {err}");
        let e_img: f64 = img.data().iter().map(|v| v * v).sum();
        assert!((e_img - spec.energy()).abs() < 1e-10);
        assert!(spec.hermitian_defect() < 1e-10);
    }

    #[test]
    fn ifft_rejects_non_hermitian_spectrum() {
        let mut spec = fft2(&random_image(8, 8, 1, 3), 0);
        spec.data[9] += Complex64::new(0.0, 1.0);
        assert!(matches!(ifft2(&spec), Err(Error::NonHermitian { .. })));
    }

    #[test]
    fn paper_mask_values() {
        let mask = make_mask(32, 32, 0.8, 0.2, 4.0).unwrap();
        let (r, _) = mask.radii();
        assert_eq!(r, 8.0);
        let g = mask.gains();
        assert_eq!(g.at_frequency(0, 0), 0.2);
        let expected = 0.8f64.powi(8) + 0.2;
        assert!((g.at_frequency(0, r as i64) - expected).abs() < 1e-12);
        assert!((expected - 0.36777216).abs() < 1e-12);
        // (0.64 * 2)^4 + 0.2 = 2.884 clips to 1.
        assert_eq!(g.at_frequency(r as i64, r as i64), 1.0);
        assert_eq!(g.get(0, 0), 1.0);
        assert!(g.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(g.symmetry_defect(), 0.0);
    }

    #[test]
    fn radius_rules() {
        assert_eq!(RadiusRule::HalfNyquistMin.radii(16, 32), (4.0, 4.0));
        assert_eq!(RadiusRule::HalfNyquistMax.radii(16, 32), (8.0, 8.0));
        assert_eq!(RadiusRule::PerAxis.radii(16, 32), (8.0, 4.0));
        assert_eq!(RadiusRule::NyquistMin.radii(16, 32), (8.0, 8.0));
    }

    #[test]
    fn mask_rejects_bad_params() {
        assert!(matches!(
            make_mask(8, 8, 0.8, 0.2, 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            make_mask(8, 8, 0.8, -0.1, 2.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn constant_image_projections() {
        let img = ImagePlane::filled(16, 16, 1, 0.7);
        let zero_dc = make_mask(16, 16, 0.8, 0.0, 4.0).unwrap();
        let hp = project(&img, &zero_dc, Band::High).unwrap();
        assert!(hp.max_abs() < 1e-14);

        let paper = make_mask(16, 16, 0.8, 0.2, 4.0).unwrap();
        let hp = project(&img, &paper, Band::High).unwrap();
        for &v in hp.data() {
            assert!((v - 0.2 * 0.7).abs() < 1e-14);
        }
    }

    #[test]
    fn cosine_is_an_eigenfunction() {
        let (h, w) = (16, 32);
        let mask = make_mask(h, w, 0.8, 0.2, 4.0).unwrap();
        for u0 in [1i64, 3, 5, 7, 12] {
            let img = ImagePlane::from_fn(h, w, 1, |_, c, _| {
                (2.0 * PI * u0 as f64 * c as f64 / w as f64).cos()
            });
            // Gain from the dense DFT of the cosine: the energy sits at +-u0.
            let x0 = dense_dft(&img, 0, u0);
            assert!(x0.norm() > 1.0);
            let gain = mask.gains().at_frequency(0, u0);
            let out = project(&img, &mask, Band::High).unwrap();
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - gain * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn binary_mask_behaviour() {
        let paper = make_mask(16, 16, 0.8, 0.2, 4.0).unwrap();
        let b = binary_mask_from(&paper, 0.5).unwrap();
        assert_eq!(b.gains().at_frequency(0, 0), 0.0);
        assert!(b.gains().is_binary());
        assert_eq!(b.gains().symmetry_defect(), 0.0);

        let ones = RadialMask {
            params: paper.params,
            threshold: None,
            gains: FrequencyMask::constant(16, 16, 1.0),
        };
        assert!(binary_mask_from(&ones, 0.5)
            .unwrap()
            .gains()
            .values()
            .iter()
            .all(|&v| v == 1.0));

        let thresholds = [0.1, 0.3, 0.5, 0.7, 0.9];
        for pair in thresholds.windows(2) {
            let lo = binary_mask_from(&paper, pair[0]).unwrap();
            let hi = binary_mask_from(&paper, pair[1]).unwrap();
            for (a, b) in hi.gains().values().iter().zip(lo.gains().values()) {
                assert!(a <= b);
            }
        }
        assert!(binary_mask_from(&paper, 1.0).is_err());
    }

    #[test]
    fn log_spectrum_cases() {
        let zero = ImagePlane::zeros(8, 8, 1);
        assert!(log_spectrum(&zero).unwrap().data().iter().all(|&v| v == 0.0));

        let mut delta = ImagePlane::zeros(8, 8, 1);
        delta.set(3, 5, 0, 1.0);
        let ls = log_spectrum(&delta).unwrap();
        let expected = (1.0f64 + 0.125).ln();
        assert!(ls.data().iter().all(|&v| (v - expected).abs() < 1e-14));
        assert!(log_spectrum(&ImagePlane::zeros(4, 4, 3)).is_err());
    }

    #[test]
    fn upsampled_image_has_less_high_band_energy() {
        let hr = random_image(32, 32, 1, 8);
        // 2x box-decimate then bilinear-upsample back.
        let lr = ImagePlane::from_fn(16, 16, 1, |r, c, _| {
            0.25 * (hr.get(2 * r, 2 * c, 0)
                + hr.get(2 * r + 1, 2 * c, 0)
                + hr.get(2 * r, 2 * c + 1, 0)
                + hr.get(2 * r + 1, 2 * c + 1, 0))
        });
        let up = ImagePlane::from_fn(32, 32, 1, |r, c, _| {
            let y = ((r as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 15.0);
            let x = ((c as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 15.0);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(15), (x0 + 1).min(15));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            (lr.get(y0, x0, 0) * (1.0 - fx) + lr.get(y0, x1, 0) * fx) * (1.0 - fy)
                + (lr.get(y1, x0, 0) * (1.0 - fx) + lr.get(y1, x1, 0) * fx) * fy
        });
        let band = binary_mask_from(&make_mask(32, 32, 0.8, 0.2, 4.0).unwrap(), 0.5).unwrap();
        let e_hr = band_energy_fraction(&hr, band.gains()).unwrap();
        let e_up = band_energy_fraction(&up, band.gains()).unwrap();
        assert!(e_up < e_hr, "upsampled {e_up} vs original {e_hr}");
    }

    #[test]
    fn projection_shape_mismatch() {
        let mask = make_mask(8, 8, 0.8, 0.2, 4.0).unwrap();
        assert!(matches!(
            project(&ImagePlane::zeros(8, 16, 1), &mask, Band::High),
            Err(Error::Shape(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn per_bin_gain_defect(img: &ImagePlane, out: &ImagePlane, mask: &FrequencyMask) -> f64 {
            let fx = fft2(img, 0);
            let fo = fft2(out, 0);
            fx.data
                .iter()
                .zip(&fo.data)
                .zip(mask.values())
                .map(|((a, b), g)| (b.norm() - g * a.norm()).abs())
                .fold(0.0, f64::max)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn projectors_are_complementary(seed in any::<u64>(), h in 3usize..20, w in 3usize..20) {
                let img = random_image(h, w, 2, seed);
                let mask = make_mask(h, w, 0.8, 0.2, 4.0).unwrap();
                let hi = project(&img, &mask, Band::High).unwrap();
                let lo = project(&img, &mask, Band::Low).unwrap();
                let sum = hi.add(&lo).unwrap();
                prop_assert!(sum.sub(&img).unwrap().max_abs() < 1e-10);
                let single = ImagePlane::new(h, w, 1, img.plane(0)).unwrap();
                let hs = project(&single, &mask, Band::High).unwrap();
                prop_assert!(per_bin_gain_defect(&single, &hs, mask.gains()) < 1e-10);
            }

            #[test]
            fn binary_projector_is_idempotent(seed in any::<u64>(), t in 0.25f64..0.95) {
                let img = random_image(12, 16, 1, seed);
                let mask = binary_mask_from(&make_mask(12, 16, 0.8, 0.2, 4.0).unwrap(), t).unwrap();
                let once = project(&img, &mask, Band::High).unwrap();
                let twice = project(&once, &mask, Band::High).unwrap();
                prop_assert!(twice.sub(&once).unwrap().max_abs() < 1e-10);
            }

            #[test]
            fn projection_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
                let x = random_image(10, 10, 1, seed);
                let y = random_image(10, 10, 1, seed ^ 0xdead);
                let mask = make_mask(10, 10, 0.8, 0.2, 4.0).unwrap();
                let combo = x.scale(a).add(&y.scale(b)).unwrap();
                let lhs = project(&combo, &mask, Band::High).unwrap();
                let rhs = project(&x, &mask, Band::High).unwrap().scale(a)
                    .add(&project(&y, &mask, Band::High).unwrap().scale(b)).unwrap();
                prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
            }
        }
    }
}
