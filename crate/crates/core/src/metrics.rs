//! Fidelity metrics on linear intensities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::spectral::{project, Band, FrequencyMask};

/// Cap used when an infinite PSNR is printed.
pub const PSNR_DISPLAY_CAP: f64 = 99.0;

/// Formats a PSNR value for text output, capping identical-image results.
pub fn format_db(psnr: f64) -> String {
    if psnr.is_finite() {
        format!("{psnr:.4}")
    } else {
        format!("{PSNR_DISPLAY_CAP:.4}")
    }
}

/// `10 log10(peak^2 / MSE)` over the pixels where `valid` is set (all pixels
/// when `None`). Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &ImagePlane, b: &ImagePlane, peak: f64, valid: Option<&[bool]>) -> Result<f64> {
    let mse = masked_mse(a, b, valid)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn masked_mse(a: &ImagePlane, b: &ImagePlane, valid: Option<&[bool]>) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let ch = a.channels();
    if let Some(v) = valid {
        if v.len() != a.pixels() {
            return Err(Error::Shape(format!(
                "validity mask has {} entries for {} pixels",
                v.len(),
                a.pixels()
            )));
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, (pa, pb)) in a.data().chunks_exact(ch).zip(b.data().chunks_exact(ch)).enumerate() {
        if valid.is_some_and(|v| !v[p]) {
            continue;
        }
        sum += pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        n += ch;
    }
    if n == 0 {
        return Err(Error::Empty("validity mask selects no pixels".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 8,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

/// Mean SSIM over all fully contained Gaussian windows. Three-channel inputs
/// are compared on luma.
pub fn ssim(a: &ImagePlane, b: &ImagePlane, params: &SsimParams) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    if a.channels() != 1 && a.channels() != 3 {
        return Err(Error::Shape(format!(
            "ssim needs 1 or 3 channels, got {}",
            a.channels()
        )));
    }
    let n = params.window;
    if n == 0 || a.height() < n || a.width() < n {
        return Err(Error::Dimension(format!(
            "{}x{} image is smaller than the {n}x{n} window",
            a.height(),
            a.width()
        )));
    }
    let (la, lb) = (a.luma(), b.luma());
    let (x, y) = (la.data(), lb.data());
    let w = a.width();
    let center = (n as f64 - 1.0) / 2.0;
    let g1: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * params.sigma * params.sigma)).exp())
        .collect();
    let norm: f64 = g1.iter().sum::<f64>().powi(2);
    let c1 = (params.k1 * params.peak).powi(2);
    let c2 = (params.k2 * params.peak).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=a.height() - n {
        for left in 0..=w - n {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gi) in g1.iter().enumerate() {
                let row = (top + i) * w + left;
                for (j, gj) in g1.iter().enumerate() {
                    let g = gi * gj / norm;
                    let (p, q) = (x[row + j], y[row + j]);
                    mx += g * p;
                    my += g * q;
                    xx += g * p * p;
                    yy += g * q * q;
                    xy += g * p * q;
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// RMS of the low-band and high-band projections of `a - b`.
pub fn band_error(a: &ImagePlane, b: &ImagePlane, mask: impl AsRef<FrequencyMask>) -> Result<(f64, f64)> {
    let diff = a.sub(b)?;
    let mask = mask.as_ref();
    let low = project(&diff, mask, Band::Low)?.rms();
    let high = project(&diff, mask, Band::High)?.rms();
    Ok((low, high))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `None` when the images are identical on the valid pixels.
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub lowband_rmse: f64,
    pub highband_rmse: f64,
    pub valid_fraction: f64,
}

impl MetricReport {
    /// Compares `test` against `reference`. PSNR honours `valid`; SSIM and the
    /// band errors are whole-image measures.
    pub fn compute(
        reference: &ImagePlane,
        test: &ImagePlane,
        mask: &FrequencyMask,
        valid: Option<&[bool]>,
    ) -> Result<Self> {
        let p = psnr(reference, test, 1.0, valid)?;
        let s = ssim(reference, test, &SsimParams::default())?;
        let (lowband_rmse, highband_rmse) = band_error(reference, test, mask)?;
        let valid_fraction = valid.map_or(1.0, |v| {
            v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
        });
        Ok(Self {
            psnr: p.is_finite().then_some(p),
            ssim: s,
            lowband_rmse,
            highband_rmse,
            valid_fraction,
        })
    }

    pub fn psnr_db(&self) -> f64 {
        self.psnr.unwrap_or(f64::INFINITY)
    }

    pub fn to_text(&self) -> String {
        format!(
            "psnr_db {}\nssim {:.6}\nlowband_rmse {:e}\nhighband_rmse {:e}\nvalid_fraction {:.6}\n",
            format_db(self.psnr_db()),
            self.ssim,
            self.lowband_rmse,
            self.highband_rmse,
            self.valid_fraction
        )
    }
}
