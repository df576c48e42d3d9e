//! Kernel-regression fusion of an aligned RAW burst onto the super-resolved
//! grid.
//!
//! Every raw sample is traced back to the scene position it was taken from:
//! decimated pixel `(r, c)` is the scene-resolution mosaic site
//! `(decimated_source_index(r), decimated_source_index(c))` of the warped
//! frame, and the frame's homography maps scene coordinates to warped
//! coordinates. The sample is splatted with a Gaussian weight into its colour
//! channel around that position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{align_burst, lr_to_hr, sample_bilinear, AlignConfig, Burst, Homography, Trajectory};
use crate::image::ImagePlane;
use crate::raw_sensor::decimated_source_index;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub sr_factor: usize,
    /// Splatting kernel standard deviation in output pixels.
    pub kernel_sigma: f64,
    /// Accumulated weight below which an output pixel is a hole.
    pub min_weight: f64,
    /// Fuse with the burst's stored trajectory instead of estimating one.
    pub use_given_trajectory: bool,
    pub align: AlignConfig,
    /// Rounds of raw-domain motion refinement against the fused estimate
    /// after luma alignment. Ignored with `use_given_trajectory`.
    pub refine_passes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            sr_factor: 4,
            kernel_sigma: 0.7,
            min_weight: 1e-3,
            use_given_trajectory: false,
            align: AlignConfig::default(),
            refine_passes: 3,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sr_factor == 0 {
            return Err(Error::Parameter("sr_factor must be at least 1".into()));
        }
        if !(self.kernel_sigma > 0.0) || !self.kernel_sigma.is_finite() {
            return Err(Error::Parameter(format!(
                "kernel_sigma must be positive, got {}",
                self.kernel_sigma
            )));
        }
        if !(self.min_weight > 0.0) {
            return Err(Error::Parameter("min_weight must be positive".into()));
        }
        Ok(())
    }
}

/// Fused image with its accumulation diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub image: ImagePlane,
    /// Accumulated kernel weight per channel, planar.
    pub weights: Vec<Vec<f64>>,
    /// Number of (pixel, channel) pairs filled by interpolation.
    pub holes: usize,
}

/// Fuses `burst` with per-frame scene-coordinate homographies `trajectory`.
pub fn fuse(burst: &Burst, trajectory: &Trajectory, cfg: &FusionConfig) -> Result<ImagePlane> {
    Ok(fuse_detailed(burst, trajectory, cfg)?.image)
}

pub fn fuse_detailed(burst: &Burst, trajectory: &Trajectory, cfg: &FusionConfig) -> Result<FusionOutput> {
    cfg.validate()?;
    if burst.is_empty() {
        return Err(Error::Empty("burst has no frames".into()));
    }
    if trajectory.len() != burst.len() {
        return Err(Error::Shape(format!(
            "{} frames but {} homographies",
            burst.len(),
            trajectory.len()
        )));
    }
    let s = cfg.sr_factor;
    let first = &burst.frames()[0];
    let (h, w) = (first.height() * s, first.width() * s);
    let radius = (3.0 * cfg.kernel_sigma).ceil() as i64;
    let inv_two_var = 1.0 / (2.0 * cfg.kernel_sigma * cfg.kernel_sigma);

    let mut num = vec![vec![0.0; h * w]; 3];
    let mut den = vec![vec![0.0; h * w]; 3];
    for (frame, hom) in burst.frames().iter().zip(trajectory.frames()) {
        let inv = hom.inverse()?;
        for r in 0..frame.height() {
            let py = decimated_source_index(r, s) as f64 + 0.5;
            for c in 0..frame.width() {
                let px = decimated_source_index(c, s) as f64 + 0.5;
                let Some((qx, qy)) = inv.apply(px, py) else {
                    continue;
                };
                // Outside the hull of scene pixel centers the warp had no
                // data and filled zeros.
                if !(qx >= 0.5 && qy >= 0.5 && qx <= w as f64 - 0.5 && qy <= h as f64 - 0.5) {
                    continue;
                }
                let ch = frame.color_at(r, c);
                let v = frame.get(r, c);
                // Output pixel (i, j) has its center at (j + 0.5, i + 0.5).
                let ci = (qy - 0.5).round() as i64;
                let cj = (qx - 0.5).round() as i64;
                for i in (ci - radius).max(0)..=(ci + radius).min(h as i64 - 1) {
                    let dy = i as f64 + 0.5 - qy;
                    for j in (cj - radius).max(0)..=(cj + radius).min(w as i64 - 1) {
                        let dx = j as f64 + 0.5 - qx;
                        let wgt = (-(dx * dx + dy * dy) * inv_two_var).exp();
                        let k = i as usize * w + j as usize;
                        num[ch][k] += wgt * v;
                        den[ch][k] += wgt;
                    }
                }
            }
        }
    }

    let mut planes = Vec::with_capacity(3);
    let mut holes = 0;
    for ch in 0..3 {
        let mut plane = vec![0.0; h * w];
        let mut known = vec![false; h * w];
        for k in 0..h * w {
            if den[ch][k] >= cfg.min_weight {
                plane[k] = num[ch][k] / den[ch][k];
                known[k] = true;
            }
        }
        let missing = known.iter().filter(|&&k| !k).count();
        if missing == h * w {
            return Err(Error::InsufficientCoverage { channel: ch });
        }
        holes += missing;
        if missing > 0 {
            fill_holes(&mut plane, &known, h, w);
        }
        planes.push(plane);
    }
    Ok(FusionOutput {
        image: ImagePlane::from_planes(h, w, &planes)?,
        weights: den,
        holes,
    })
}

/// Fills unknown pixels by linear interpolation between the nearest known
/// pixels along the row and the column (averaging both when available), then
/// sweeps any remaining pixels with the mean of filled 4-neighbours.
fn fill_holes(plane: &mut [f64], known: &[bool], h: usize, w: usize) {
    let original = plane.to_vec();
    let mut filled = known.to_vec();
    let along = |idx: &dyn Fn(usize) -> usize, len: usize, pos: usize| -> Option<f64> {
        let before = (0..pos).rev().find(|&p| known[idx(p)]);
        let after = (pos + 1..len).find(|&p| known[idx(p)]);
        match (before, after) {
            (Some(a), Some(b)) => {
                let t = (pos - a) as f64 / (b - a) as f64;
                Some(original[idx(a)] * (1.0 - t) + original[idx(b)] * t)
            }
            (Some(a), None) => Some(original[idx(a)]),
            (None, Some(b)) => Some(original[idx(b)]),
            (None, None) => None,
        }
    };
    for r in 0..h {
        for c in 0..w {
            let k = r * w + c;
            if known[k] {
                continue;
            }
            let row = along(&|p| r * w + p, w, c);
            let col = along(&|p| p * w + c, h, r);
            let v = match (row, col) {
                (Some(a), Some(b)) => Some(0.5 * (a + b)),
                (a, b) => a.or(b),
            };
            if let Some(v) = v {
                plane[k] = v;
                filled[k] = true;
            }
        }
    }
    loop {
        let mut progress = false;
        let snapshot = filled.clone();
        for r in 0..h {
            for c in 0..w {
                let k = r * w + c;
                if snapshot[k] {
                    continue;
                }
                let mut acc = 0.0;
                let mut n = 0;
                let neighbours = [
                    (r > 0).then(|| k - w),
                    (r + 1 < h).then(|| k + w),
                    (c > 0).then(|| k - 1),
                    (c + 1 < w).then(|| k + 1),
                ];
                for nb in neighbours.into_iter().flatten() {
                    if snapshot[nb] {
                        acc += plane[nb];
                        n += 1;
                    }
                }
                if n > 0 {
                    plane[k] = acc / n as f64;
                    filled[k] = true;
                    progress = true;
                }
            }
        }
        if !progress {
            break;
        }
    }
}

/// Output of [`reconstruct`].
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub image: ImagePlane,
    /// Scene-coordinate trajectory of the frames that were fused.
    pub trajectory: Trajectory,
    /// Frames left out because their alignment failed.
    pub dropped_frames: Vec<usize>,
}

/// Aligns (unless told to trust the stored trajectory) and fuses.
pub fn reconstruct(burst: &Burst, cfg: &FusionConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    if cfg.use_given_trajectory {
        return Ok(Reconstruction {
            image: fuse(burst, &burst.trajectory, cfg)?,
            trajectory: burst.trajectory.clone(),
            dropped_frames: Vec::new(),
        });
    }
    let aligned = align_burst(burst, &cfg.align)?;
    let hr = aligned
        .trajectory
        .map(|h| lr_to_hr(h, cfg.sr_factor))?;
    let keep: Vec<usize> = (0..burst.len()).filter(|i| !aligned.failed.contains(i)).collect();
    if keep.is_empty() {
        return Err(Error::Empty("every frame failed to align".into()));
    }
    if !aligned.failed.is_empty() {
        log::warn!("dropping {} frame(s) that failed to align", aligned.failed.len());
    }
    let frames = keep.iter().map(|&i| burst.frames()[i].clone()).collect();
    let homs = keep.iter().map(|&i| *hr.get(i)).collect::<Vec<_>>();
    let mut traj = Trajectory::new(homs)?;
    let sub = Burst::new(frames, traj.clone())?;
    let mut image = fuse(&sub, &traj, cfg)?;
    for _ in 0..cfg.refine_passes {
        traj = refine_trajectory(&sub, &image, &traj, cfg)?;
        image = fuse(&sub, &traj, cfg)?;
    }
    Ok(Reconstruction {
        image,
        trajectory: traj,
        dropped_frames: aligned.failed,
    })
}

/// Re-estimates every non-reference homography by matching each raw sample
/// against `estimate` resampled through the forward model (warp, mosaic,
/// decimation). Luma alignment of mosaicked frames is biased by chroma that
/// moves with the CFA phase; this fit is not, because it compares each
/// sample with the channel it actually recorded.
pub fn refine_trajectory(
    burst: &Burst,
    estimate: &ImagePlane,
    trajectory: &Trajectory,
    cfg: &FusionConfig,
) -> Result<Trajectory> {
    let s = cfg.sr_factor;
    let first = &burst.frames()[0];
    if estimate.channels() != 3 || estimate.height() != first.height() * s || estimate.width() != first.width() * s {
        return Err(Error::Shape(format!(
            "estimate is {}x{}x{}, expected {}x{}x3",
            estimate.height(),
            estimate.width(),
            estimate.channels(),
            first.height() * s,
            first.width() * s
        )));
    }
    let planes = estimate.planes();
    let mut out = vec![Homography::identity()];
    for (frame, hom) in burst.frames().iter().zip(trajectory.frames()).skip(1) {
        out.push(refine_frame(frame, &planes, hom, cfg)?);
    }
    Trajectory::new(out)
}

/// Gauss-Newton on the entries of `H^-1`, restricted to the alignment
/// model's parameters, with step halving when the residual grows.
fn refine_frame(
    frame: &crate::raw_sensor::RawFrame,
    planes: &[Vec<f64>],
    hom: &Homography,
    cfg: &FusionConfig,
) -> Result<Homography> {
    let s = cfg.sr_factor;
    let (h, w) = (frame.height() * s, frame.width() * s);
    // Stay clear of the estimate's border, where coverage is thinnest.
    let margin = s as f64 + 1.0;
    let active = cfg.align.model.parameters();
    let np = active.len();
    // Parameter k of the alignment model addresses this entry of the matrix.
    const ENTRY: [(usize, usize); 8] = [(0, 0), (1, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 0), (2, 1)];

    let residual = |g: &[[f64; 3]; 3], jac: Option<(&mut nalgebra::DMatrix<f64>, &mut nalgebra::DVector<f64>)>| {
        let (mut sum, mut n) = (0.0, 0usize);
        let mut jac = jac;
        for r in 0..frame.height() {
            let py = decimated_source_index(r, s) as f64 + 0.5;
            for c in 0..frame.width() {
                let px = decimated_source_index(c, s) as f64 + 0.5;
                let d = g[2][0] * px + g[2][1] * py + g[2][2];
                if d <= 1e-12 {
                    continue;
                }
                let qx = (g[0][0] * px + g[0][1] * py + g[0][2]) / d;
                let qy = (g[1][0] * px + g[1][1] * py + g[1][2]) / d;
                if !(qx >= margin && qy >= margin && qx <= w as f64 - margin && qy <= h as f64 - margin) {
                    continue;
                }
                let plane = &planes[frame.color_at(r, c)];
                let at = |x: f64, y: f64| sample_bilinear(plane, h, w, x - 0.5, y - 0.5).unwrap_or(0.0);
                let e = at(qx, qy) - frame.get(r, c);
                sum += e * e;
                n += 1;
                if let Some((hess, rhs)) = jac.as_mut() {
                    let gx = at(qx + 0.5, qy) - at(qx - 0.5, qy);
                    let gy = at(qx, qy + 0.5) - at(qx, qy - 0.5);
                    let full = [
                        gx * px / d,
                        gy * px / d,
                        gx * py / d,
                        gy * py / d,
                        gx / d,
                        gy / d,
                        -(gx * qx + gy * qy) * px / d,
                        -(gx * qx + gy * qy) * py / d,
                    ];
                    for a in 0..np {
                        let ja = full[active[a]];
                        rhs[a] += ja * e;
                        for b in 0..np {
                            hess[(a, b)] += ja * full[active[b]];
                        }
                    }
                }
            }
        }
        if n < 4 * np {
            f64::INFINITY
        } else {
            sum / n as f64
        }
    };

    let mut g = hom.inverse()?.matrix();
    let mut cost = residual(&g, None);
    if !cost.is_finite() {
        return Ok(*hom);
    }
    for _ in 0..cfg.align.max_iters {
        let mut hess = nalgebra::DMatrix::<f64>::zeros(np, np);
        let mut rhs = nalgebra::DVector::<f64>::zeros(np);
        residual(&g, Some((&mut hess, &mut rhs)));
        let Some(step) = hess.clone().cholesky().map(|ch| ch.solve(&rhs)).or_else(|| hess.lu().solve(&rhs)) else {
            break;
        };
        let mut scale = 1.0;
        let mut accepted = false;
        while scale > 1e-3 {
            let mut next = g;
            for (k, &idx) in active.iter().enumerate() {
                let (i, j) = ENTRY[idx];
                next[i][j] -= scale * step[k];
            }
            let c = residual(&next, None);
            if c < cost {
                g = next;
                cost = c;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || scale * step.amax() < cfg.align.tol {
            break;
        }
    }
    Homography::new(g)?.inverse()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{warp, Homography};
    use crate::raw_sensor::{extract_channels, mosaic, space_to_depth_decimate, CfaPattern, RawFrame};

    fn frame_from(rgb: &ImagePlane, h: &Homography, s: usize) -> RawFrame {
        let warped = warp(rgb, h).unwrap().image;
        space_to_depth_decimate(&mosaic(&warped, CfaPattern::Rggb).unwrap(), s).unwrap()
    }

    fn cfg(s: usize) -> FusionConfig {
        FusionConfig {
            sr_factor: s,
            use_given_trajectory: true,
            ..FusionConfig::default()
        }
    }

    #[test]
    fn single_frame_matches_extract_on_linear_content() {
        let (h, w) = (16, 16);
        let rgb = ImagePlane::from_fn(h, w, 3, |r, c, ch| match ch {
            0 => 0.3,
            1 => 0.2 + 0.02 * c as f64 + 0.01 * r as f64,
            _ => 0.6,
        });
        let raw = mosaic(&rgb, CfaPattern::Rggb).unwrap();
        let burst = Burst::new(vec![raw.clone()], Trajectory::identity(1)).unwrap();
        let fused = fuse(&burst, &burst.trajectory, &cfg(1)).unwrap();
        let demosaiced = extract_channels(&raw);
        // Kernel regression and bilinear interpolation agree on linear
        // content away from the border.
        let m = 3;
        let a = fused.crop(m, m, h - 2 * m, w - 2 * m).unwrap();
        let b = demosaiced.crop(m, m, h - 2 * m, w - 2 * m).unwrap();
        assert!(a.sub(&b).unwrap().rms() < 1e-6);
    }

    #[test]
    fn regular_offsets_complete_the_mosaic() {
        let s = 2;
        let gt = crate::scene::band_limited_rgb(32, 32, 2, 5);
        let traj = crate::geometry::regular_offset_trajectory(s).unwrap();
        let frames: Vec<RawFrame> = traj.frames().iter().map(|h| frame_from(&gt, h, s)).collect();
        let burst = Burst::new(frames, traj.clone()).unwrap();
        assert_eq!(fuse_detailed(&burst, &traj, &cfg(s)).unwrap().holes, 0);
        // Same-colour neighbours sit at distance sqrt(2) or more; at this
        // width their weight is below 1e-3 of the direct sample.
        let narrow = FusionConfig {
            kernel_sigma: 0.35,
            ..cfg(s)
        };
        let out = fuse_detailed(&burst, &traj, &narrow).unwrap();
        let hr_mosaic = mosaic(&gt, CfaPattern::Rggb).unwrap();
        let mut sq = 0.0;
        for r in 0..32 {
            for c in 0..32 {
                let ch = hr_mosaic.color_at(r, c);
                sq += (out.image.get(r, c, ch) - hr_mosaic.get(r, c)).powi(2);
            }
        }
        let rms = (sq / 1024.0).sqrt();
        assert!(rms < 1e-3, "site rms {rms}");
    }

    #[test]
    fn zero_burst_gives_zero() {
        let raw = RawFrame::filled(8, 8, CfaPattern::Rggb, 0.0).unwrap();
        let burst = Burst::new(vec![raw.clone(), raw], Trajectory::new(vec![
            Homography::identity(),
            Homography::translation(0.5, 0.25),
        ]).unwrap())
        .unwrap();
        let out = fuse(&burst, &burst.trajectory, &cfg(2)).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn permutation_invariance() {
        let s = 2;
        let gt = crate::scene::band_limited_rgb(32, 32, 3, 2);
        let homs = vec![
            Homography::identity(),
            Homography::translation(0.7, -1.1),
            Homography::translation(-1.3, 0.4),
            Homography::rotation_about(0.01, 16.0, 16.0),
        ];
        let frames: Vec<RawFrame> = homs.iter().map(|h| frame_from(&gt, h, s)).collect();
        let a = Burst::new(frames.clone(), Trajectory::new(homs.clone()).unwrap()).unwrap();
        let order = [0, 3, 1, 2];
        let b = Burst::new(
            order.iter().map(|&i| frames[i].clone()).collect(),
            Trajectory::new(order.iter().map(|&i| homs[i]).collect()).unwrap(),
        )
        .unwrap();
        let fa = fuse(&a, &a.trajectory, &cfg(s)).unwrap();
        let fb = fuse(&b, &b.trajectory, &cfg(s)).unwrap();
        assert!(fa.sub(&fb).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn more_frames_never_add_holes() {
        let s = 4;
        let gt = crate::scene::band_limited_rgb(64, 64, 3, 2);
        let traj = crate::geometry::synth_trajectory(6, 2.0, 0.9, 3).unwrap();
        let frames: Vec<RawFrame> = traj.frames().iter().map(|h| frame_from(&gt, h, s)).collect();
        let tight = FusionConfig {
            kernel_sigma: 0.3,
            ..cfg(s)
        };
        let mut last = usize::MAX;
        for n in 1..=6 {
            let sub = Burst::new(
                frames[..n].to_vec(),
                Trajectory::new(traj.frames()[..n].to_vec()).unwrap(),
            )
            .unwrap();
            let holes = fuse_detailed(&sub, &sub.trajectory, &tight).unwrap().holes;
            assert!(holes <= last);
            last = holes;
        }
    }

    #[test]
    fn linear_in_intensities() {
        let s = 2;
        let homs = vec![Homography::identity(), Homography::translation(1.0, 0.5)];
        let traj = Trajectory::new(homs.clone()).unwrap();
        let x = crate::scene::band_limited_rgb(16, 16, 2, 1);
        let y = crate::scene::band_limited_rgb(16, 16, 2, 2);
        let fx: Vec<RawFrame> = homs.iter().map(|h| frame_from(&x, h, s)).collect();
        let fy: Vec<RawFrame> = homs.iter().map(|h| frame_from(&y, h, s)).collect();
        let mix: Vec<RawFrame> = fx
            .iter()
            .zip(&fy)
            .map(|(a, b)| {
                let data = a.data().iter().zip(b.data()).map(|(a, b)| 0.3 * a + 0.6 * b).collect();
                RawFrame::new(a.height(), a.width(), a.cfa(), a.bit_depth(), data).unwrap()
            })
            .collect();
        let c = cfg(s);
        let out = fuse_detailed(&Burst::new(mix, traj.clone()).unwrap(), &traj, &c).unwrap();
        assert!(out.holes > 0, "hole filling should be exercised too");
        let ox = fuse(&Burst::new(fx, traj.clone()).unwrap(), &traj, &c).unwrap();
        let oy = fuse(&Burst::new(fy, traj.clone()).unwrap(), &traj, &c).unwrap();
        let expect = ox.scale(0.3).add(&oy.scale(0.6)).unwrap();
        assert!(out.image.sub(&expect).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn holes_are_interpolated() {
        let mut plane = vec![0.0, 0.0, 4.0, 0.0, 8.0];
        let known = vec![true, false, true, false, true];
        fill_holes(&mut plane, &known, 1, 5);
        assert_eq!(plane, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn oracle_mode_equals_fuse() {
        let s = 2;
        let gt = crate::scene::band_limited_rgb(32, 32, 3, 7);
        let traj = crate::geometry::synth_trajectory(3, 1.0, 0.9, 1).unwrap();
        let frames = traj.frames().iter().map(|h| frame_from(&gt, h, s)).collect();
        let burst = Burst::new(frames, traj.clone()).unwrap();
        let rec = reconstruct(&burst, &cfg(s)).unwrap();
        assert_eq!(rec.image, fuse(&burst, &traj, &cfg(s)).unwrap());
    }
}
