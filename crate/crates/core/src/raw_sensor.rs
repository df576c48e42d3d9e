//! Camera sensor model: Bayer mosaicing, linear channel extraction,
//! Bayer-preserving decimation and Poisson-Gaussian noise.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;

pub const RED: usize = 0;
pub const GREEN: usize = 1;
pub const BLUE: usize = 2;

/// 2x2 colour filter tile layout, named in reading order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CfaPattern {
    #[default]
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl CfaPattern {
    pub const ALL: [CfaPattern; 4] = [
        CfaPattern::Rggb,
        CfaPattern::Bggr,
        CfaPattern::Grbg,
        CfaPattern::Gbrg,
    ];

    /// Colour channel sampled at tile offset `(dr, dc)`, both in `0..2`.
    #[inline]
    pub fn color_at(self, dr: usize, dc: usize) -> usize {
        let tile = match self {
            CfaPattern::Rggb => [[RED, GREEN], [GREEN, BLUE]],
            CfaPattern::Bggr => [[BLUE, GREEN], [GREEN, RED]],
            CfaPattern::Grbg => [[GREEN, RED], [BLUE, GREEN]],
            CfaPattern::Gbrg => [[GREEN, BLUE], [RED, GREEN]],
        };
        tile[dr & 1][dc & 1]
    }

    /// Tile offsets carrying `color`; green yields two entries.
    pub fn sites_of(self, color: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(2);
        for dr in 0..2 {
            for dc in 0..2 {
                if self.color_at(dr, dc) == color {
                    out.push((dr, dc));
                }
            }
        }
        out
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CfaPattern::Rggb => "RGGB",
            CfaPattern::Bggr => "BGGR",
            CfaPattern::Grbg => "GRBG",
            CfaPattern::Gbrg => "GBRG",
        }
    }
}

impl fmt::Display for CfaPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CfaPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RGGB" => Ok(CfaPattern::Rggb),
            "BGGR" => Ok(CfaPattern::Bggr),
            "GRBG" => Ok(CfaPattern::Grbg),
            "GBRG" => Ok(CfaPattern::Gbrg),
            other => Err(Error::Parameter(format!("unknown CFA pattern {other:?}"))),
        }
    }
}

/// Single-channel Bayer mosaic with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    height: usize,
    width: usize,
    cfa: CfaPattern,
    bit_depth: u32,
    data: Vec<f64>,
}

pub const DEFAULT_BIT_DEPTH: u32 = 12;

impl RawFrame {
    pub fn new(
        height: usize,
        width: usize,
        cfa: CfaPattern,
        bit_depth: u32,
        data: Vec<f64>,
    ) -> Result<Self> {
        if height % 2 != 0 || width % 2 != 0 {
            return Err(Error::Dimension(format!(
                "raw frame must have even dimensions, got {height}x{width}"
            )));
        }
        if !(1..=16).contains(&bit_depth) {
            return Err(Error::Parameter(format!("bit depth {bit_depth} outside 1..=16")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} raw frame needs {} samples, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(i) = data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::Parameter(format!(
                "raw sample {i} = {} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            height,
            width,
            cfa,
            bit_depth,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, cfa: CfaPattern, value: f64) -> Result<Self> {
        Self::new(height, width, cfa, DEFAULT_BIT_DEPTH, vec![value; height * width])
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn cfa(&self) -> CfaPattern {
        self.cfa
    }

    #[inline]
    pub fn bit_depth(&self) -> u32 {
        self.bit_depth
    }

    pub fn with_bit_depth(mut self, bit_depth: u32) -> Result<Self> {
        if !(1..=16).contains(&bit_depth) {
            return Err(Error::Parameter(format!("bit depth {bit_depth} outside 1..=16")));
        }
        self.bit_depth = bit_depth;
        Ok(self)
    }

    /// Maximum code value, `2^bit_depth - 1`.
    pub fn white_level(&self) -> u32 {
        (1u32 << self.bit_depth) - 1
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn color_at(&self, r: usize, c: usize) -> usize {
        self.cfa.color_at(r, c)
    }

    /// Rounds every sample to the nearest code value of the declared bit depth.
    pub fn quantized(&self) -> RawFrame {
        let white = self.white_level() as f64;
        RawFrame {
            data: self
                .data
                .iter()
                .map(|v| (v * white).round() / white)
                .collect(),
            ..self.clone()
        }
    }

    pub fn same_layout(&self, other: &RawFrame) -> bool {
        self.height == other.height && self.width == other.width && self.cfa == other.cfa
    }

    /// The frame as a one-channel image (no interpolation).
    pub fn to_plane(&self) -> ImagePlane {
        ImagePlane::new(self.height, self.width, 1, self.data.clone())
            .expect("raw frame invariants imply a valid plane")
    }
}

/// Samples `rgb` through the colour filter array.
pub fn mosaic(rgb: &ImagePlane, cfa: CfaPattern) -> Result<RawFrame> {
    if rgb.channels() != 3 {
        return Err(Error::Shape(format!(
            "mosaic needs a 3-channel image, got {} channels",
            rgb.channels()
        )));
    }
    let (h, w) = (rgb.height(), rgb.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "mosaic needs even dimensions, got {h}x{w}"
        )));
    }
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            data.push(rgb.get(r, c, cfa.color_at(r, c)));
        }
    }
    RawFrame::new(h, w, cfa, DEFAULT_BIT_DEPTH, data)
}

/// Bilinearly upsamples the quarter-resolution grid of sites at tile offset
/// `(dr, dc)` to full resolution, replicating edges.
fn upsample_sites(raw: &RawFrame, dr: usize, dc: usize) -> Vec<f64> {
    let (h, w) = (raw.height, raw.width);
    let (gh, gw) = (h / 2, w / 2);
    let site = |i: usize, j: usize| raw.data[(2 * i + dr) * w + 2 * j + dc];

    // Per-axis (lower index, fraction) lookup shared by every row/column.
    let axis = |n: usize, off: usize, len: usize| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|p| {
                let g = ((p as f64 - off as f64) / 2.0).clamp(0.0, (len - 1) as f64);
                let i0 = g.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, g - i0 as f64)
            })
            .collect()
    };
    let rows = axis(h, dr, gh);
    let cols = axis(w, dc, gw);

    let mut out = Vec::with_capacity(h * w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = site(r0, c0) * (1.0 - fx) + site(r0, c1) * fx;
            let bottom = site(r1, c0) * (1.0 - fx) + site(r1, c1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Deterministic linear demosaic.
///
/// Red and blue come from bilinear upsampling of their site grids. Green is
/// the mean of the two upsampled green site grids, except at native green
/// sites where the recorded sample is kept, so every output channel equals
/// the raw value wherever that channel was measured.
pub fn extract_channels(raw: &RawFrame) -> ImagePlane {
    let (h, w) = (raw.height, raw.width);
    let cfa = raw.cfa;
    let red = {
        let (dr, dc) = cfa.sites_of(RED)[0];
        upsample_sites(raw, dr, dc)
    };
    let blue = {
        let (dr, dc) = cfa.sites_of(BLUE)[0];
        upsample_sites(raw, dr, dc)
    };
    let greens = cfa.sites_of(GREEN);
    let g1 = upsample_sites(raw, greens[0].0, greens[0].1);
    let g2 = upsample_sites(raw, greens[1].0, greens[1].1);

    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let g = if cfa.color_at(r, c) == GREEN {
                raw.data[i]
            } else {
                0.5 * (g1[i] + g2[i])
            };
            data.extend_from_slice(&[red[i], g, blue[i]]);
        }
    }
    ImagePlane::new(h, w, 3, data).expect("interpolation of finite samples is finite")
}

/// Stacks `extract_channels` of every frame into a `3N`-channel volume, frame
/// `i` occupying channels `3i..3i+3`.
pub fn pack_frames(frames: &[RawFrame]) -> Result<ImagePlane> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Empty("cannot pack an empty burst".into()))?;
    if let Some(i) = frames.iter().position(|f| !f.same_layout(first)) {
        return Err(Error::Shape(format!(
            "frame {i} differs in size or CFA from frame 0"
        )));
    }
    let (h, w) = (first.height, first.width);
    let n = frames.len();
    let extracted: Vec<ImagePlane> = frames.iter().map(extract_channels).collect();
    let mut data = vec![0.0; h * w * 3 * n];
    for (f, img) in extracted.iter().enumerate() {
        for (p, px) in img.data().chunks_exact(3).enumerate() {
            data[p * 3 * n + 3 * f..p * 3 * n + 3 * f + 3].copy_from_slice(px);
        }
    }
    ImagePlane::new(h, w, 3 * n, data)
}

/// Full-resolution row (or column) that a Bayer-preserving space-to-depth
/// decimation by `factor` keeps at decimated index `index`.
#[inline]
pub fn decimated_source_index(index: usize, factor: usize) -> usize {
    2 * factor * (index / 2) + index % 2
}

/// Keeps one 2x2 Bayer quad out of every `factor x factor` block of quads.
///
/// Output quad `(I, J)` is input quad `(factor*I, factor*J)`, so the CFA phase
/// of the survivors is unchanged and no anti-alias prefilter is applied.
pub fn space_to_depth_decimate(raw: &RawFrame, factor: usize) -> Result<RawFrame> {
    if factor == 0 {
        return Err(Error::Parameter("decimation factor must be >= 1".into()));
    }
    let (h, w) = (raw.height, raw.width);
    if h % (2 * factor) != 0 || w % (2 * factor) != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} is not divisible by 2*{factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let cols: Vec<usize> = (0..ow).map(|c| decimated_source_index(c, factor)).collect();
    let mut data = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let src = decimated_source_index(r, factor) * w;
        data.extend(cols.iter().map(|&c| raw.data[src + c]));
    }
    Ok(RawFrame {
        height: oh,
        width: ow,
        cfa: raw.cfa,
        bit_depth: raw.bit_depth,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// `N(mu, a*mu + b^2)`, the heteroscedastic approximation.
    #[default]
    Gaussian,
    /// `a * Poisson(mu / a) + N(0, b^2)`.
    Poisson,
}

impl FromStr for NoiseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(NoiseModel::Gaussian),
            "poisson" => Ok(NoiseModel::Poisson),
            other => Err(Error::Parameter(format!("unknown noise model {other:?}"))),
        }
    }
}

/// Signal-dependent sensor noise: variance `shot_gain * mu + read_sigma^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub shot_gain: f64,
    pub read_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub model: NoiseModel,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            shot_gain: 0.01,
            read_sigma: 0.02,
            seed: 0,
            model: NoiseModel::Gaussian,
        }
    }
}

impl NoiseParams {
    pub fn noiseless() -> Self {
        Self {
            shot_gain: 0.0,
            read_sigma: 0.0,
            ..Self::default()
        }
    }

    /// Default parameters scaled linearly by an ISO-like gain.
    pub fn at_iso(iso_scale: f64, seed: u64) -> Self {
        let base = Self::default();
        Self {
            shot_gain: base.shot_gain * iso_scale,
            read_sigma: base.read_sigma * iso_scale,
            seed,
            model: base.model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shot_gain >= 0.0) || !(self.read_sigma >= 0.0) {
            return Err(Error::Parameter(format!(
                "noise parameters must be non-negative (a = {}, b = {})",
                self.shot_gain, self.read_sigma
            )));
        }
        Ok(())
    }

    pub fn variance_at(&self, mu: f64) -> f64 {
        self.shot_gain * mu.max(0.0) + self.read_sigma * self.read_sigma
    }

    pub fn is_zero(&self) -> bool {
        self.shot_gain == 0.0 && self.read_sigma == 0.0
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Noisy samples before the `[0, 1]` clamp. `add_poisson_gaussian` is exactly
/// the clamp of this stream for the same parameters.
pub fn sample_noisy(frame: &RawFrame, params: &NoiseParams) -> Result<Vec<f64>> {
    params.validate()?;
    if params.is_zero() {
        return Ok(frame.data.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let b = params.read_sigma;
    let out = match params.model {
        NoiseModel::Gaussian => frame
            .data
            .iter()
            .map(|&mu| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mu + params.variance_at(mu).sqrt() * z
            })
            .collect(),
        NoiseModel::Poisson => {
            let a = params.shot_gain;
            frame
                .data
                .iter()
                .map(|&mu| {
                    let shot = if a > 0.0 && mu > 0.0 {
                        let lambda = mu / a;
                        let k: f64 = Poisson::new(lambda)
                            .map_err(|e| Error::Parameter(format!("poisson rate {lambda}: {e}")))?
                            .sample(&mut rng);
                        a * k
                    } else {
                        mu
                    };
                    let z: f64 = StandardNormal.sample(&mut rng);
                    Ok(shot + b * z)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(out)
}

/// Replaces each sample `mu` by a draw with mean `mu` and variance
/// `a*mu + b^2`, clamped to `[0, 1]`. Deterministic given `params.seed`.
pub fn add_poisson_gaussian(frame: &RawFrame, params: &NoiseParams) -> Result<RawFrame> {
    let data = sample_noisy(frame, params)?
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(RawFrame {
        data,
        ..frame.clone()
    })
}
