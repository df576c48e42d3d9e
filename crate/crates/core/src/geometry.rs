//! Homographies, bilinear warping, tremor trajectories and intensity-based
//! registration.
//!
//! All coordinates use the pixel-center convention: the center of pixel
//! `(r, c)` is the point `(c + 0.5, r + 0.5)`.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::raw_sensor::{extract_channels, pack_frames, RawFrame};

/// Smallest `|det|` accepted for a normalized homography.
pub const MIN_DETERMINANT: f64 = 1e-12;

/// Tolerance for the reference frame of a trajectory being the identity.
pub const REFERENCE_TOL: f64 = 1e-9;

/// Projective 3x3 transform normalized so that `m[2][2] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    pub const fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalizes and validates an arbitrary matrix.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("homography has non-finite entries".into()));
        }
        let s = m[2][2];
        if s.abs() < MIN_DETERMINANT {
            return Err(Error::Singular { det: 0.0 });
        }
        let mut n = m;
        for row in n.iter_mut() {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let h = Self { m: n };
        let det = h.det();
        if det.abs() <= MIN_DETERMINANT {
            return Err(Error::Singular { det });
        }
        Ok(h)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation by `theta` radians about `(cx, cy)`.
    pub fn rotation_about(theta: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            m: [
                [c, -s, cx - c * cx + s * cy],
                [s, c, cy - s * cx - c * cy],
                [0.0, 0.0, 1.0],
            ],
        }
    }

    /// `diag(sx, sy, 1)`.
    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self {
            m: [[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    fn from_na(m: &Matrix3<f64>) -> Result<Self> {
        Self::new([
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse via the adjugate, so the identity and pure translations invert
    /// exactly.
    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let det = self.det();
        if det.abs() <= MIN_DETERMINANT {
            return Err(Error::Singular { det });
        }
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        // adj / det, renormalized; adj[2][2] = det of the affine block.
        Self::new(adj)
    }

    /// Matrix product `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[r][k] * other.m[k][c]).sum();
            }
        }
        Self::new(out)
    }

    /// Maps a point; `None` if it lands on or behind the line at infinity.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w <= 1e-12 {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }

    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    /// Mean distance between the images of the four corners of a
    /// `width x height` frame under `self` and `other`.
    pub fn corner_error(&self, other: &Homography, width: f64, height: f64) -> f64 {
        let corners = [(0.0, 0.0), (width, 0.0), (0.0, height), (width, height)];
        let mut total = 0.0;
        for (x, y) in corners {
            match (self.apply(x, y), other.apply(x, y)) {
                (Some(a), Some(b)) => total += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
                _ => return f64::INFINITY,
            }
        }
        total / 4.0
    }

    /// Conjugates by `A = [[s, 0, o], [0, s, o], [0, 0, 1]]`, i.e. expresses a
    /// warp between coordinate frames related by `x' = s x + o`.
    pub fn rescaled(&self, scale: f64, offset: f64) -> Result<Self> {
        let a = Homography {
            m: [[scale, 0.0, offset], [0.0, scale, offset], [0.0, 0.0, 1.0]],
        };
        a.compose(self)?.compose(&a.inverse()?)
    }

    /// The same motion expressed in the coordinates of a crop window whose
    /// top-left pixel is `(top, left)`.
    pub fn cropped(&self, top: f64, left: f64) -> Result<Self> {
        Homography::translation(-left, -top)
            .compose(self)?
            .compose(&Homography::translation(left, top))
    }

    /// `(tx, ty)` of the translation column.
    pub fn translation_part(&self) -> (f64, f64) {
        (self.m[0][2], self.m[1][2])
    }
}

/// Offset of the sensor-to-scene map `x_hr = s x_lr + o` after Bayer-preserving
/// decimation by `factor`, averaged over the two site parities.
pub fn decimation_offset(factor: usize) -> f64 {
    1.0 - factor as f64
}

/// Converts a homography estimated on decimated frames to scene coordinates.
pub fn lr_to_hr(h: &Homography, factor: usize) -> Result<Homography> {
    h.rescaled(factor as f64, decimation_offset(factor))
}

/// Converts a scene-coordinate homography to decimated-frame coordinates.
pub fn hr_to_lr(h: &Homography, factor: usize) -> Result<Homography> {
    let s = factor as f64;
    let o = decimation_offset(factor);
    h.rescaled(1.0 / s, -o / s)
}

/// Per-frame homographies of a burst, frame 0 being the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    frames: Vec<Homography>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    frames: Vec<[[f64; 3]; 3]>,
}

impl Trajectory {
    pub fn new(frames: Vec<Homography>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Empty("trajectory has no frames".into()))?;
        let deviation = first.max_abs_diff(&Homography::identity());
        if deviation > REFERENCE_TOL {
            return Err(Error::ReferenceFrame { deviation });
        }
        Ok(Self { frames })
    }

    pub fn identity(n_frames: usize) -> Self {
        Self {
            frames: vec![Homography::identity(); n_frames.max(1)],
        }
    }

    pub fn frames(&self) -> &[Homography] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, i: usize) -> &Homography {
        &self.frames[i]
    }

    pub fn map(&self, f: impl Fn(&Homography) -> Result<Homography>) -> Result<Trajectory> {
        Trajectory::new(self.frames.iter().map(f).collect::<Result<_>>()?)
    }

    /// Pixels of a `height x width` reference grid that lie at least `margin`
    /// inside the pixel-center hull and that every frame maps at least
    /// `margin` inside its own hull, i.e. away from any zero-filled warp
    /// border. A margin of a pixel or so keeps estimated-motion comparisons
    /// clear of samples sitting exactly on the hull.
    pub fn common_support(&self, height: usize, width: usize, margin: f64) -> Vec<bool> {
        let (hf, wf) = (height as f64, width as f64);
        let inside = |x: f64, y: f64| x >= 0.5 + margin && y >= 0.5 + margin && x <= wf - 0.5 - margin && y <= hf - 0.5 - margin;
        let mut out = vec![false; height * width];
        for r in 0..height {
            for c in 0..width {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                out[r * width + c] = inside(x, y)
                    && self
                        .frames
                        .iter()
                        .all(|h| h.apply(x, y).is_some_and(|(u, v)| inside(u, v)));
            }
        }
        out
    }

    /// Mean corner error per frame against `other`.
    pub fn corner_errors(&self, other: &Trajectory, width: f64, height: f64) -> Vec<f64> {
        self.frames
            .iter()
            .zip(&other.frames)
            .map(|(a, b)| a.corner_error(b, width, height))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TrajectoryFile {
            frames: self.frames.iter().map(|h| h.m).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str, path: Option<&Path>) -> Result<Self> {
        let file: TrajectoryFile =
            serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        if file.frames.is_empty() {
            return Err(Error::Empty("trajectory has no frames".into()));
        }
        let frames = file
            .frames
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                Homography::new(m).map_err(|e| match e {
                    Error::Singular { det } => {
                        Error::format(path, format!("frame {i} is singular (det {det:e})"))
                    }
                    other => Error::format(path, format!("frame {i}: {other}")),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(frames)
    }
}

pub fn save_trajectory(t: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, t.to_json()?)?;
    Ok(())
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    Trajectory::from_json(&text, Some(path))
}

/// Warped image plus per-pixel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub image: ImagePlane,
    /// Row-major, `true` where both bilinear taps were inside the source.
    pub validity: Vec<bool>,
}

impl WarpResult {
    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    /// `true` at pixels that are at least `margin` pixels inside the valid
    /// region in every direction.
    pub fn eroded(&self, margin: usize) -> Vec<bool> {
        let (h, w) = (self.image.height(), self.image.width());
        let mut out = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                if r < margin || c < margin || r + margin >= h || c + margin >= w {
                    continue;
                }
                let mut ok = true;
                'scan: for rr in r - margin..=r + margin {
                    for cc in c - margin..=c + margin {
                        if !self.validity[rr * w + cc] {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
                out[r * w + c] = ok;
            }
        }
        out
    }
}

/// Bilinear sample of a planar buffer at index coordinates `(x, y)` (pixel
/// centers at integers). `None` if a tap falls outside the grid.
#[inline]
pub(crate) fn sample_bilinear(plane: &[f64], height: usize, width: usize, x: f64, y: f64) -> Option<f64> {
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let ax = x - x0 as f64;
    let ay = y - y0 as f64;
    let top = plane[y0 * width + x0] * (1.0 - ax) + plane[y0 * width + x1] * ax;
    let bot = plane[y1 * width + x0] * (1.0 - ax) + plane[y1 * width + x1] * ax;
    Some(top * (1.0 - ay) + bot * ay)
}

/// `out(p) = src(h^-1 p)` with bilinear sampling, same size as `src`.
pub fn warp(src: &ImagePlane, h: &Homography) -> Result<WarpResult> {
    warp_to_size(src, h, src.height(), src.width())
}

/// [`warp`] onto an output grid of a different size sharing the origin.
pub fn warp_to_size(src: &ImagePlane, h: &Homography, height: usize, width: usize) -> Result<WarpResult> {
    let inv = h.inverse()?;
    let (sh, sw, ch) = (src.height(), src.width(), src.channels());
    let planes = src.planes();
    let mut out = vec![vec![0.0; height * width]; ch];
    let mut validity = vec![false; height * width];
    if sh == 0 || sw == 0 {
        return Ok(WarpResult {
            image: ImagePlane::from_planes(height, width, &out)?,
            validity,
        });
    }
    for r in 0..height {
        for c in 0..width {
            let Some((x, y)) = inv.apply(c as f64 + 0.5, r as f64 + 0.5) else {
                continue;
            };
            let (fx, fy) = (x - 0.5, y - 0.5);
            let i = r * width + c;
            for (k, plane) in planes.iter().enumerate() {
                match sample_bilinear(plane, sh, sw, fx, fy) {
                    Some(v) => {
                        out[k][i] = v;
                        validity[i] = true;
                    }
                    None => break,
                }
            }
        }
    }
    Ok(WarpResult {
        image: ImagePlane::from_planes(height, width, &out)?,
        validity,
    })
}

/// AR(1) tremor model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TremorParams {
    /// Standard deviation of the last frame's translation per axis, pixels.
    pub magnitude: f64,
    /// Lag-1 correlation of consecutive increments.
    pub smoothness: f64,
    /// Rotation standard deviation in degrees at `magnitude = 2`.
    pub rotation_sigma_deg: f64,
    /// Relative scale standard deviation at `magnitude = 2`.
    pub scale_sigma: f64,
    /// Perspective term standard deviation (per pixel) at `magnitude = 2`.
    pub perspective_sigma: f64,
}

impl Default for TremorParams {
    fn default() -> Self {
        Self {
            magnitude: 2.0,
            smoothness: 0.9,
            rotation_sigma_deg: 0.1,
            scale_sigma: 0.002,
            perspective_sigma: 1e-5,
        }
    }
}

/// Reference magnitude at which the non-translation sigmas apply unscaled.
const REFERENCE_MAGNITUDE: f64 = 2.0;

impl TremorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude >= 0.0) || !self.magnitude.is_finite() {
            return Err(Error::Parameter(format!(
                "tremor magnitude must be non-negative, got {}",
                self.magnitude
            )));
        }
        if !(0.0..1.0).contains(&self.smoothness) {
            return Err(Error::Parameter(format!(
                "smoothness must lie in [0, 1), got {}",
                self.smoothness
            )));
        }
        for (name, v) in [
            ("rotation", self.rotation_sigma_deg),
            ("scale", self.scale_sigma),
            ("perspective", self.perspective_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} sigma must be non-negative")));
            }
        }
        Ok(())
    }
}

/// `sum_{i,j < n} rho^|i-j|`, the variance of a sum of `n` unit-variance
/// stationary AR(1) terms.
fn ar1_sum_variance(n: usize, rho: f64) -> f64 {
    let mut s = n as f64;
    let mut p = 1.0;
    for lag in 1..n {
        p *= rho;
        s += 2.0 * (n - lag) as f64 * p;
    }
    s
}

/// Builds the homography for one set of tremor parameters about `(cx, cy)`.
/// `p = [tx, ty, theta, sx - 1, sy - 1, p1, p2]`.
fn tremor_homography(p: &[f64; 7], cx: f64, cy: f64) -> Result<Homography> {
    let (s, c) = p[2].sin_cos();
    let (sx, sy) = (1.0 + p[3], 1.0 + p[4]);
    // Centered model M = [[R diag(s), t], [p1 p2 1]], then T(c) M T(-c).
    let m = Matrix3::new(
        c * sx, -s * sy, p[0],
        s * sx, c * sy, p[1],
        p[5], p[6], 1.0,
    );
    let t = Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
    let ti = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    Homography::from_na(&(t * m * ti))
}

/// Translations by `-2(a, b)` scene pixels for `a, b` in `0..factor`.
///
/// After Bayer-preserving decimation by `factor` these frames jointly sample
/// every scene-resolution mosaic site exactly once.
pub fn regular_offset_trajectory(factor: usize) -> Result<Trajectory> {
    if factor == 0 {
        return Err(Error::Parameter("factor must be at least 1".into()));
    }
    let mut frames = Vec::with_capacity(factor * factor);
    for b in 0..factor {
        for a in 0..factor {
            frames.push(Homography::translation(-2.0 * a as f64, -2.0 * b as f64));
        }
    }
    Trajectory::new(frames)
}

/// Smooth random homography trajectory about the origin.
pub fn synth_trajectory(n_frames: usize, magnitude: f64, smoothness: f64, seed: u64) -> Result<Trajectory> {
    let params = TremorParams {
        magnitude,
        smoothness,
        ..TremorParams::default()
    };
    synth_trajectory_with(n_frames, &params, (0.0, 0.0), seed)
}

/// Smooth random homography trajectory; rotation, scale and perspective act
/// about `center`.
///
/// Each of the seven parameters is a cumulative sum of stationary AR(1)
/// increments with correlation `smoothness`; increment variance is chosen so
/// the last frame's translation has standard deviation `magnitude` per axis.
pub fn synth_trajectory_with(
    n_frames: usize,
    params: &TremorParams,
    center: (f64, f64),
    seed: u64,
) -> Result<Trajectory> {
    params.validate()?;
    if n_frames == 0 {
        return Err(Error::Empty("trajectory needs at least one frame".into()));
    }
    let mut frames = vec![Homography::identity()];
    if n_frames == 1 {
        return Trajectory::new(frames);
    }
    let rho = params.smoothness;
    let norm = ar1_sum_variance(n_frames - 1, rho).sqrt();
    let rel = params.magnitude / REFERENCE_MAGNITUDE;
    let sigmas = [
        params.magnitude,
        params.magnitude,
        params.rotation_sigma_deg.to_radians() * rel,
        params.scale_sigma * rel,
        params.scale_sigma * rel,
        params.perspective_sigma * rel,
        params.perspective_sigma * rel,
    ]
    .map(|s| s / norm);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let innovation = (1.0 - rho * rho).sqrt();
    let mut inc = [0.0f64; 7];
    let mut acc = [0.0f64; 7];
    for i in 1..n_frames {
        for k in 0..7 {
            let e: f64 = StandardNormal.sample(&mut rng);
            inc[k] = if i == 1 { e } else { rho * inc[k] + innovation * e };
            acc[k] += sigmas[k] * inc[k];
        }
        frames.push(tremor_homography(&acc, center.0, center.1)?);
    }
    Trajectory::new(frames)
}

/// Degrees of freedom of the estimated motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionModel {
    Translation,
    Affine,
    #[default]
    Homography,
}

impl MotionModel {
    pub(crate) fn parameters(self) -> &'static [usize] {
        match self {
            MotionModel::Translation => &[4, 5],
            MotionModel::Affine => &[0, 1, 2, 3, 4, 5],
            MotionModel::Homography => &[0, 1, 2, 3, 4, 5, 6, 7],
        }
    }
}

impl FromStr for MotionModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "translation" => Ok(MotionModel::Translation),
            "affine" => Ok(MotionModel::Affine),
            "homography" => Ok(MotionModel::Homography),
            other => Err(Error::Parameter(format!("unknown motion model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub model: MotionModel,
    pub levels: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Reference pixels this close to the frame edge (at full resolution)
    /// are left out of the fit, so zero-filled warp borders in the moving
    /// frame cannot pull the estimate.
    pub border: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            model: MotionModel::Homography,
            levels: 3,
            max_iters: 50,
            tol: 1e-6,
            border: 3,
        }
    }
}

/// Outcome of [`estimate_homography`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    /// Maps reference coordinates to moving coordinates, so that
    /// `warp(reference, homography)` approximates `moving`.
    pub homography: Homography,
    pub converged: bool,
    pub iterations: usize,
    /// Mean squared difference over valid pixels at the identity.
    pub initial_ssd: f64,
    /// Same quantity at the returned homography.
    pub final_ssd: f64,
}

/// Single-channel pyramid level.
struct Level {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Level {
    fn downsample(&self) -> Level {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let i = 2 * r * self.width + 2 * c;
                data.push(
                    0.25 * (self.data[i]
                        + self.data[i + 1]
                        + self.data[i + self.width]
                        + self.data[i + self.width + 1]),
                );
            }
        }
        Level {
            height: h,
            width: w,
            data,
        }
    }
}

fn single_channel(img: &ImagePlane) -> Level {
    let luma = img.luma();
    Level {
        height: luma.height(),
        width: luma.width(),
        data: luma.into_data(),
    }
}

fn variance(data: &[f64]) -> f64 {
    let n = data.len().max(1) as f64;
    let mean = data.iter().sum::<f64>() / n;
    data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Mean squared `moving(G x) - reference(x)` over pixels whose warped
/// position is inside `moving`.
fn mean_ssd(reference: &Level, moving: &Level, g: &Homography, margin: usize) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    let rows = margin..reference.height.saturating_sub(margin);
    let cols = margin..reference.width.saturating_sub(margin);
    let template = rows.len() * cols.len();
    for r in rows {
        for c in cols.clone() {
            let Some((x, y)) = g.apply(c as f64 + 0.5, r as f64 + 0.5) else {
                continue;
            };
            if let Some(v) = sample_bilinear(&moving.data, moving.height, moving.width, x - 0.5, y - 0.5) {
                let e = v - reference.data[r * reference.width + c];
                sum += e * e;
                n += 1;
            }
        }
    }
    // A mean over a shrinking overlap can always be lowered by shrinking it
    // further, so warps that keep less than half the frame are rejected.
    if n == 0 || 2 * n < template {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

/// Inverse-compositional Gauss-Newton at one pyramid level. `g` is in the
/// level's pixel coordinates. Returns the best warp seen, its SSD, the
/// iteration count and whether the update norm dropped below `tol`.
fn refine_level(
    reference: &Level,
    moving: &Level,
    mut g: Homography,
    cfg: &AlignConfig,
    margin: usize,
) -> Result<(Homography, f64, usize, bool)> {
    let (h, w) = (reference.height, reference.width);
    let active = cfg.model.parameters();
    let np = active.len();

    // Normalized coordinates x_n = (x - cx) / s keep the Hessian well scaled.
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let s = (w.max(h) as f64 / 2.0).max(1.0);
    let norm = Homography {
        m: [[1.0 / s, 0.0, -cx / s], [0.0, 1.0 / s, -cy / s], [0.0, 0.0, 1.0]],
    };
    let denorm = norm.inverse()?;

    // Steepest-descent images of the template (interior pixels only).
    let mut sd_rows: Vec<(usize, usize, Vec<f64>)> = Vec::with_capacity(h * w);
    let edge = margin.max(1);
    for r in edge..h.saturating_sub(edge) {
        for c in edge..w.saturating_sub(edge) {
            let i = r * w + c;
            let gx = 0.5 * (reference.data[i + 1] - reference.data[i - 1]) * s;
            let gy = 0.5 * (reference.data[i + w] - reference.data[i - w]) * s;
            let x = (c as f64 + 0.5 - cx) / s;
            let y = (r as f64 + 0.5 - cy) / s;
            let full = [
                gx * x,
                gy * x,
                gx * y,
                gy * y,
                gx,
                gy,
                -gx * x * x - gy * x * y,
                -gx * x * y - gy * y * y,
            ];
            sd_rows.push((r, c, active.iter().map(|&k| full[k]).collect()));
        }
    }

    let mut best = (g, mean_ssd(reference, moving, &g, margin));
    let mut converged = false;
    let mut iters = 0;
    for _ in 0..cfg.max_iters {
        iters += 1;
        let mut hess = DMatrix::<f64>::zeros(np, np);
        let mut rhs = DVector::<f64>::zeros(np);
        let mut n_valid = 0usize;
        for (r, c, sd) in &sd_rows {
            let Some((x, y)) = g.apply(*c as f64 + 0.5, *r as f64 + 0.5) else {
                continue;
            };
            let Some(v) = sample_bilinear(&moving.data, moving.height, moving.width, x - 0.5, y - 0.5) else {
                continue;
            };
            let e = v - reference.data[r * w + c];
            for a in 0..np {
                rhs[a] += sd[a] * e;
                for b in a..np {
                    hess[(a, b)] += sd[a] * sd[b];
                }
            }
            n_valid += 1;
        }
        if n_valid < 4 * np {
            break;
        }
        for a in 0..np {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        let Some(dp) = hess.clone().cholesky().map(|ch| ch.solve(&rhs)).or_else(|| hess.lu().solve(&rhs))
        else {
            break;
        };
        let mut p = [0.0; 8];
        for (k, &idx) in active.iter().enumerate() {
            p[idx] = dp[k];
        }
        let delta = Homography::new([
            [1.0 + p[0], p[2], p[4]],
            [p[1], 1.0 + p[3], p[5]],
            [p[6], p[7], 1.0],
        ]);
        let Ok(delta) = delta else { break };
        // G <- G N^-1 delta^-1 N in pixel coordinates.
        let step = denorm.compose(&delta.inverse()?)?.compose(&norm)?;
        let Ok(next) = g.compose(&step) else { break };
        g = next;
        let ssd = mean_ssd(reference, moving, &g, margin);
        if ssd < best.1 {
            best = (g, ssd);
        }
        if dp.norm() < cfg.tol {
            converged = true;
            break;
        }
    }
    // A converged iterate is the stationary point of the linearized problem.
    // Its mean SSD can exceed that of a worse warp, because bilinear
    // resampling at fractional offsets smooths the moving image, so the
    // lowest-SSD warp is only the fallback for runs that did not settle.
    if converged {
        let ssd = mean_ssd(reference, moving, &g, margin);
        if ssd.is_finite() {
            return Ok((g, ssd, iters, true));
        }
    }
    Ok((best.0, best.1, iters, converged))
}

/// Homography `H` such that `warp(reference, H)` matches `moving`, i.e.
/// `moving(H x) = reference(x)`, by coarse-to-fine inverse-compositional
/// Gauss-Newton on intensities. Multi-channel inputs are reduced to luma.
pub fn estimate_homography(reference: &ImagePlane, moving: &ImagePlane, cfg: &AlignConfig) -> Result<Alignment> {
    if reference.height() != moving.height() || reference.width() != moving.width() {
        return Err(Error::Shape(format!(
            "alignment inputs differ: {}x{} vs {}x{}",
            reference.height(),
            reference.width(),
            moving.height(),
            moving.width()
        )));
    }
    if cfg.levels == 0 || !(cfg.tol > 0.0) {
        return Err(Error::Parameter("alignment needs levels >= 1 and tol > 0".into()));
    }
    let r0 = single_channel(reference);
    let m0 = single_channel(moving);
    for lvl in [&r0, &m0] {
        let var = variance(&lvl.data);
        if var < 1e-12 {
            return Err(Error::FlatImage { variance: var });
        }
    }

    let mut pyr = vec![(r0, m0)];
    while pyr.len() < cfg.levels {
        let (r, m) = pyr.last().unwrap();
        if r.height / 2 < 8 || r.width / 2 < 8 {
            break;
        }
        let next = (r.downsample(), m.downsample());
        pyr.push(next);
    }

    let initial_ssd = mean_ssd(&pyr[0].0, &pyr[0].1, &Homography::identity(), cfg.border);
    let mut g = Homography::identity();
    let mut converged = false;
    let mut iterations = 0;
    let mut final_ssd = initial_ssd;
    for level in (0..pyr.len()).rev() {
        let f = (1u64 << level) as f64;
        // Level-l pixel coordinates are level-0 coordinates divided by 2^l.
        let g_level = g.rescaled(1.0 / f, 0.0)?;
        let (r, m) = &pyr[level];
        // Coarse levels have too few pixels to pin down a full homography.
        let model = match level {
            0 => cfg.model,
            l if l + 1 == pyr.len() => MotionModel::Translation,
            _ => cfg.model.min(MotionModel::Affine),
        };
        let margin = cfg.border.div_ceil(1 << level);
        let (best, ssd, it, conv) = refine_level(r, m, g_level, &AlignConfig { model, ..*cfg }, margin)?;
        iterations += it;
        g = best.rescaled(f, 0.0)?;
        if level == 0 {
            converged = conv;
            final_ssd = ssd;
        }
    }
    if !converged && final_ssd > initial_ssd {
        g = Homography::identity();
        final_ssd = initial_ssd;
        converged = false;
    }
    Ok(Alignment {
        homography: g,
        converged,
        iterations,
        initial_ssd,
        final_ssd,
    })
}

/// Frames of one capture with their (ground-truth or estimated) motion.
#[derive(Debug, Clone, PartialEq)]
pub struct Burst {
    frames: Vec<RawFrame>,
    pub trajectory: Trajectory,
    pub meta: BTreeMap<String, String>,
}

impl Burst {
    pub fn new(frames: Vec<RawFrame>, trajectory: Trajectory) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Empty("burst has no frames".into()))?;
        if frames.len() != trajectory.len() {
            return Err(Error::Shape(format!(
                "{} frames but {} trajectory entries",
                frames.len(),
                trajectory.len()
            )));
        }
        if let Some(i) = frames.iter().position(|f| !f.same_layout(first)) {
            return Err(Error::Shape(format!("frame {i} differs in size or CFA")));
        }
        Ok(Self {
            frames,
            trajectory,
            meta: BTreeMap::new(),
        })
    }

    pub fn frames(&self) -> &[RawFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }
}

/// `3N`-channel stack of per-frame [`extract_channels`] outputs.
pub fn pack_burst(burst: &Burst) -> Result<ImagePlane> {
    pack_frames(&burst.frames)
}

/// Result of registering every frame of a burst to frame 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BurstAlignment {
    /// In the burst frames' own pixel coordinates.
    pub trajectory: Trajectory,
    /// Frames whose estimate failed; they carry the identity.
    pub failed: Vec<usize>,
    pub alignments: Vec<Option<Alignment>>,
}

/// Registers each frame's demosaiced luma to frame 0.
pub fn align_burst(burst: &Burst, cfg: &AlignConfig) -> Result<BurstAlignment> {
    let lumas: Vec<ImagePlane> = burst
        .frames
        .iter()
        .map(|f| extract_channels(f).luma())
        .collect();
    let mut frames = vec![Homography::identity()];
    let mut failed = Vec::new();
    let mut alignments = vec![None];
    for (i, moving) in lumas.iter().enumerate().skip(1) {
        match estimate_homography(&lumas[0], moving, cfg) {
            Ok(a) => {
                frames.push(a.homography);
                alignments.push(Some(a));
            }
            Err(Error::FlatImage { .. } | Error::Singular { .. }) => {
                log::warn!("frame {i}: alignment failed, using identity");
                frames.push(Homography::identity());
                failed.push(i);
                alignments.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if variance(lumas[0].data()) < 1e-12 {
        // A flat reference makes every estimate meaningless.
        failed = (0..burst.len()).collect();
    }
    Ok(BurstAlignment {
        trajectory: Trajectory::new(frames)?,
        failed,
        alignments,
    })
}
