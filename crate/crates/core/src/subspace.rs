//! Exact range/null-space projectors of small circular blur operators.
//!
//! A [`BccbOperator`] is a circular convolution on an `n x n` grid, optionally
//! followed by keeping every `d`-th sample per axis. For small grids the
//! operator is materialized densely and its pseudo-inverse taken through an
//! SVD, which gives the reference projectors `P_L = A^+ A` and
//! `P_H = I - P_L`. For `d = 1` the same projectors are diagonal in the
//! Fourier basis, which [`fourier_null_projector`] exploits.

use std::str::FromStr;

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::spectral::{centered_frequency, project_with, Band, Fft2d, FrequencyMask, Spectrum};

/// Largest grid side for which dense matrices are built.
pub const ORACLE_MAX_N: usize = 32;

/// Relative singular-value (and spectral magnitude) cut-off.
pub const RANK_TOL: f64 = 1e-10;

/// Convolution kernel families understood by [`KernelSpec::from_str`].
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Identity,
    Zero,
    /// `k x k` box average.
    Box(usize),
    /// Two-tap horizontal average `[1, 1] / 2`.
    HorizontalAverage,
    /// Sampled Gaussian of the given standard deviation in pixels.
    Gaussian(f64),
    /// Gaussian convolved with a 2x2 box, which zeroes the Nyquist row and
    /// column exactly on even grids.
    GaussianBox(f64),
    /// Random positive low-pass kernel with exact spectral zeros.
    Random(u64),
}

impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s, None),
        };
        let num = |what: &str| -> Result<f64> {
            arg.ok_or_else(|| Error::Parameter(format!("kernel {what} needs an argument")))?
                .parse::<f64>()
                .map_err(|e| Error::Parameter(format!("kernel {what}: {e}")))
        };
        let spec = match name {
            "identity" | "delta" => KernelSpec::Identity,
            "zero" => KernelSpec::Zero,
            "avg-h" | "hbox2" => KernelSpec::HorizontalAverage,
            "box" => {
                let k = num("box")?;
                if k < 1.0 || k.fract() != 0.0 {
                    return Err(Error::Parameter(format!("box size must be a positive integer, got {k}")));
                }
                KernelSpec::Box(k as usize)
            }
            "gaussian" => KernelSpec::Gaussian(num("gaussian")?),
            "gaussian-box" => KernelSpec::GaussianBox(num("gaussian-box")?),
            "random" => KernelSpec::Random(num("random")? as u64),
            other => return Err(Error::Parameter(format!("unknown kernel {other:?}"))),
        };
        if let KernelSpec::Gaussian(sigma) | KernelSpec::GaussianBox(sigma) = spec {
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(Error::Parameter(format!("gaussian sigma must be positive, got {sigma}")));
            }
        }
        Ok(spec)
    }
}

impl std::fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelSpec::Identity => write!(f, "identity"),
            KernelSpec::Zero => write!(f, "zero"),
            KernelSpec::Box(k) => write!(f, "box:{k}"),
            KernelSpec::HorizontalAverage => write!(f, "avg-h"),
            KernelSpec::Gaussian(s) => write!(f, "gaussian:{s}"),
            KernelSpec::GaussianBox(s) => write!(f, "gaussian-box:{s}"),
            KernelSpec::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

/// Circularly convolves two `n x n` kernels (origin at index 0).
fn circular_convolve(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for (i, &av) in a.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let (ar, ac) = (i / n, i % n);
        for (j, &bv) in b.iter().enumerate() {
            let (br, bc) = (j / n, j % n);
            out[((ar + br) % n) * n + (ac + bc) % n] += av * bv;
        }
    }
    out
}

/// Places taps given at signed offsets into an `n x n` wrapped kernel.
fn wrapped(n: usize, taps: &[(i64, i64, f64)]) -> Vec<f64> {
    let mut k = vec![0.0; n * n];
    for &(dr, dc, v) in taps {
        let r = dr.rem_euclid(n as i64) as usize;
        let c = dc.rem_euclid(n as i64) as usize;
        k[r * n + c] += v;
    }
    k
}

fn box_taps(kr: usize, kc: usize) -> Vec<(i64, i64, f64)> {
    let w = 1.0 / (kr * kc) as f64;
    let mut taps = Vec::with_capacity(kr * kc);
    for r in 0..kr {
        for c in 0..kc {
            taps.push((r as i64 - (kr / 2) as i64, c as i64 - (kc / 2) as i64, w));
        }
    }
    taps
}

fn gaussian_taps(sigma: f64) -> Vec<(i64, i64, f64)> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps = Vec::new();
    let mut total = 0.0;
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            let v = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
            total += v;
            taps.push((dr, dc, v));
        }
    }
    for t in &mut taps {
        t.2 /= total;
    }
    taps
}

impl KernelSpec {
    /// Materializes the kernel on an `n x n` grid with its origin at `(0, 0)`.
    pub fn build(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::Dimension("kernel grid must be non-empty".into()));
        }
        Ok(match *self {
            KernelSpec::Identity => wrapped(n, &[(0, 0, 1.0)]),
            KernelSpec::Zero => vec![0.0; n * n],
            KernelSpec::Box(k) => wrapped(n, &box_taps(k, k)),
            KernelSpec::HorizontalAverage => wrapped(n, &[(0, 0, 0.5), (0, 1, 0.5)]),
            KernelSpec::Gaussian(sigma) => wrapped(n, &gaussian_taps(sigma)),
            KernelSpec::GaussianBox(sigma) => circular_convolve(
                &wrapped(n, &gaussian_taps(sigma)),
                &wrapped(n, &box_taps(2, 2)),
                n,
            ),
            KernelSpec::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut taps = Vec::with_capacity(9);
                let mut total = 0.0;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let v = rng.random_range(0.2..1.0) / (1.0 + (dr * dr + dc * dc) as f64);
                        total += v;
                        taps.push((dr, dc, v));
                    }
                }
                for t in &mut taps {
                    t.2 /= total;
                }
                let mut k = wrapped(n, &taps);
                // Zeros: the horizontal 2-tap average always, vertical and
                // 4-tap factors at random.
                k = circular_convolve(&k, &wrapped(n, &box_taps(1, 2)), n);
                if rng.random_bool(0.5) {
                    k = circular_convolve(&k, &wrapped(n, &box_taps(2, 1)), n);
                }
                if n % 4 == 0 && rng.random_bool(0.5) {
                    k = circular_convolve(&k, &wrapped(n, &box_taps(1, 4)), n);
                }
                k
            }
        })
    }
}

/// Circular convolution on an `n x n` grid followed by stride-`d` sampling.
#[derive(Debug, Clone)]
pub struct BccbOperator {
    n: usize,
    decimation: usize,
    kernel: Vec<f64>,
    /// Unnormalized DFT of the kernel, centered.
    spectrum: Spectrum,
    fft: Fft2d,
    label: String,
}

impl BccbOperator {
    /// `kernel` is `n x n`, row-major, origin at index 0.
    pub fn new(n: usize, kernel: Vec<f64>, decimation: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Dimension("operator grid must be non-empty".into()));
        }
        if kernel.len() != n * n {
            return Err(Error::Shape(format!(
                "kernel has {} taps, expected {}",
                kernel.len(),
                n * n
            )));
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("kernel taps must be finite".into()));
        }
        if decimation == 0 || n % decimation != 0 {
            return Err(Error::Dimension(format!(
                "decimation {decimation} does not divide grid size {n}"
            )));
        }
        let fft = Fft2d::new(n, n);
        let mut spectrum = fft.forward(&kernel);
        let scale = n as f64;
        for z in &mut spectrum.data {
            *z *= scale;
        }
        Ok(Self {
            n,
            decimation,
            kernel,
            spectrum,
            fft,
            label: "custom".into(),
        })
    }

    pub fn from_spec(n: usize, spec: &KernelSpec, decimation: usize) -> Result<Self> {
        let mut op = Self::new(n, spec.build(n)?, decimation)?;
        op.label = spec.to_string();
        Ok(op)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn decimation(&self) -> usize {
        self.decimation
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// `Lambda(u, v)`, the unnormalized DFT of the kernel on the centered grid.
    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn input_len(&self) -> usize {
        self.n * self.n
    }

    pub fn output_len(&self) -> usize {
        let m = self.n / self.decimation;
        m * m
    }

    /// `y = S_d (k * x)` computed in the Fourier domain.
    pub fn apply_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_len() {
            return Err(Error::Shape(format!(
                "operator expects {} samples, got {}",
                self.input_len(),
                x.len()
            )));
        }
        let mut spec = self.fft.forward(x);
        for (z, l) in spec.data.iter_mut().zip(&self.spectrum.data) {
            *z *= l;
        }
        let full = self.fft.inverse(&spec)?;
        if self.decimation == 1 {
            return Ok(full);
        }
        let (n, d) = (self.n, self.decimation);
        let mut out = Vec::with_capacity(self.output_len());
        for r in (0..n).step_by(d) {
            for c in (0..n).step_by(d) {
                out.push(full[r * n + c]);
            }
        }
        Ok(out)
    }

    fn check_dense(&self) -> Result<()> {
        if self.n > ORACLE_MAX_N {
            return Err(Error::OracleScale {
                n: self.n,
                max: ORACLE_MAX_N,
            });
        }
        Ok(())
    }

    /// The `(n/d)^2 x n^2` matrix of the operator, built column by column.
    pub fn dense(&self) -> Result<DMatrix<f64>> {
        self.check_dense()?;
        let (n, d) = (self.n, self.decimation);
        let m = n / d;
        // Column j is the kernel shifted to pixel j, then decimated.
        let mut a = DMatrix::zeros(m * m, n * n);
        for j in 0..n * n {
            let (jr, jc) = (j / n, j % n);
            for (i, (r, c)) in (0..n)
                .step_by(d)
                .flat_map(|r| (0..n).step_by(d).map(move |c| (r, c)))
                .enumerate()
            {
                let kr = (r + n - jr) % n;
                let kc = (c + n - jc) % n;
                a[(i, j)] = self.kernel[kr * n + kc];
            }
        }
        Ok(a)
    }
}

/// Dense projectors and the SVD data behind them.
#[derive(Debug, Clone)]
pub struct DenseProjectors {
    pub range: DMatrix<f64>,
    pub null: DMatrix<f64>,
    pub pseudo_inverse: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
}

/// `A^+` from a full SVD, zeroing singular values below `RANK_TOL * sigma_max`.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, usize) {
    let (rows, cols) = a.shape();
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let mut pinv = DMatrix::zeros(cols, rows);
    let mut rank = 0;
    if smax > 0.0 {
        for (k, &s) in sv.iter().enumerate() {
            if s > RANK_TOL * smax {
                rank += 1;
                let v = vt.row(k).transpose();
                let uk = u.column(k);
                pinv += (v * uk.transpose()) / s;
            }
        }
    }
    (pinv, sv, rank)
}

pub fn dense_projectors(op: &BccbOperator) -> Result<DenseProjectors> {
    let a = op.dense()?;
    let (pinv, singular_values, rank) = pseudo_inverse(&a);
    let range = &pinv * &a;
    let n2 = op.input_len();
    let null = DMatrix::identity(n2, n2) - &range;
    Ok(DenseProjectors {
        range,
        null,
        pseudo_inverse: pinv,
        singular_values,
        rank,
    })
}

/// `P_L = A^+ A`.
pub fn range_projector(op: &BccbOperator) -> Result<DMatrix<f64>> {
    Ok(dense_projectors(op)?.range)
}

/// `P_H = I - A^+ A`.
pub fn null_projector(op: &BccbOperator) -> Result<DMatrix<f64>> {
    Ok(dense_projectors(op)?.null)
}

/// Binary gains of the null-space projector, diagonal in the Fourier basis:
/// 1 where `|Lambda| <= RANK_TOL * max |Lambda|`, else 0.
pub fn fourier_null_projector(op: &BccbOperator) -> Result<FrequencyMask> {
    if op.decimation != 1 {
        return Err(Error::Unsupported(format!(
            "stride-{} sampling is not diagonal in the Fourier basis; use the dense projectors",
            op.decimation
        )));
    }
    let mags: Vec<f64> = op.spectrum.data.iter().map(|z| z.norm()).collect();
    let max = mags.iter().copied().fold(0.0, f64::max);
    let values = mags
        .iter()
        .map(|&m| if m <= RANK_TOL * max { 1.0 } else { 0.0 })
        .collect();
    FrequencyMask::new(op.n, op.n, values)
}

/// Applies Fourier gains to a flattened `n x n` signal.
pub fn apply_gains(mask: &FrequencyMask, x: &[f64]) -> Result<Vec<f64>> {
    let (h, w) = (mask.height(), mask.width());
    let img = ImagePlane::new(h, w, 1, x.to_vec())?;
    let fft = Fft2d::new(h, w);
    Ok(project_with(&fft, &img, mask, Band::High)?.into_data())
}

/// Dense matrix of a Fourier-gain operator on an `n x n` grid.
pub fn gains_matrix(mask: &FrequencyMask) -> Result<DMatrix<f64>> {
    let (h, w) = (mask.height(), mask.width());
    if h.max(w) > ORACLE_MAX_N {
        return Err(Error::OracleScale {
            n: h.max(w),
            max: ORACLE_MAX_N,
        });
    }
    let n2 = h * w;
    let fft = Fft2d::new(h, w);
    let mut m = DMatrix::zeros(n2, n2);
    let mut e = vec![0.0; n2];
    for j in 0..n2 {
        e[j] = 1.0;
        let img = ImagePlane::new(h, w, 1, e.clone())?;
        let col = project_with(&fft, &img, mask, Band::High)?;
        for (i, &v) in col.data().iter().enumerate() {
            m[(i, j)] = v;
        }
        e[j] = 0.0;
    }
    Ok(m)
}

/// Eigenvalues of the dense operator (square case only).
pub fn dense_eigenvalues(op: &BccbOperator) -> Result<Vec<Complex64>> {
    if op.decimation != 1 {
        return Err(Error::Unsupported("eigenvalues need a square operator".into()));
    }
    let a = op.dense()?;
    Ok(a.complex_eigenvalues()
        .iter()
        .map(|z: &Complex<f64>| Complex64::new(z.re, z.im))
        .collect())
}

/// Largest distance in a greedy nearest-neighbour matching of two multisets.
pub fn multiset_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for x in a {
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, y) in b.iter().enumerate() {
            if !used[j] {
                let d = (x - y).norm();
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        used[best.1] = true;
        worst = worst.max(best.0);
    }
    worst
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct BinGain {
    pub u: i64,
    pub v: i64,
    /// Gain of the compared mask.
    pub mask: f64,
    /// `<f_uv, P_H f_uv>` for the unit Fourier vector of the bin.
    pub null: f64,
}

/// How closely a frequency mask reproduces the exact null projector.
#[derive(Debug, Clone, Serialize)]
pub struct FidelityReport {
    pub n: usize,
    pub decimation: usize,
    pub kernel: String,
    pub rank: usize,
    pub null_dimension: usize,
    /// `|| M - P_H ||_2` with `M` the dense matrix of the mask.
    pub operator_norm_diff: f64,
    pub max_bin_diff: f64,
    pub mean_bin_diff: f64,
    /// Gain above which a strongly observed bin counts as leaking.
    pub leak_threshold: f64,
    /// Bins with null gain below 0.5, i.e. well determined by the measurement.
    pub strong_bins: usize,
    /// Strong bins whose mask gain exceeds `leak_threshold`.
    pub leaking_bins: usize,
    pub leak_fraction: f64,
    pub bins: Vec<BinGain>,
}

/// Compares `mask` (as an operator) against the dense `P_H` of `op`.
pub fn mask_fidelity_report(op: &BccbOperator, mask: &FrequencyMask, leak_threshold: f64) -> Result<FidelityReport> {
    let n = op.n;
    if mask.height() != n || mask.width() != n {
        return Err(Error::Shape(format!(
            "{}x{} mask vs {n}x{n} operator",
            mask.height(),
            mask.width()
        )));
    }
    let proj = dense_projectors(op)?;
    let m = gains_matrix(mask)?;
    let operator_norm_diff = spectral_norm(&(&m - &proj.null));

    let n2 = n * n;
    let mut bins = Vec::with_capacity(n2);
    let (mut max_diff, mut sum_diff) = (0.0f64, 0.0);
    let (mut strong, mut leaking) = (0usize, 0usize);
    let norm = 1.0 / n as f64;
    for r in 0..n {
        let v = centered_frequency(r, n);
        for c in 0..n {
            let u = centered_frequency(c, n);
            let mut re = DVector::zeros(n2);
            let mut im = DVector::zeros(n2);
            for y in 0..n {
                for x in 0..n {
                    let phase = 2.0 * std::f64::consts::PI * (u * x as i64 + v * y as i64) as f64 / n as f64;
                    re[y * n + x] = phase.cos() * norm;
                    im[y * n + x] = phase.sin() * norm;
                }
            }
            let null = re.dot(&(&proj.null * &re)) + im.dot(&(&proj.null * &im));
            let gain = mask.get(r, c);
            let d = (gain - null).abs();
            max_diff = max_diff.max(d);
            sum_diff += d;
            if null < 0.5 {
                strong += 1;
                if gain > leak_threshold {
                    leaking += 1;
                }
            }
            bins.push(BinGain { u, v, mask: gain, null });
        }
    }
    Ok(FidelityReport {
        n,
        decimation: op.decimation,
        kernel: op.label.clone(),
        rank: proj.rank,
        null_dimension: n2 - proj.rank,
        operator_norm_diff,
        max_bin_diff: max_diff,
        mean_bin_diff: sum_diff / n2 as f64,
        leak_threshold,
        strong_bins: strong,
        leaking_bins: leaking,
        leak_fraction: if strong > 0 { leaking as f64 / strong as f64 } else { 0.0 },
        bins,
    })
}

/// Symmetry and idempotence defects `(||P - P^T||_max, ||P P - P||_max)`.
pub fn projector_defects(p: &DMatrix<f64>) -> (f64, f64) {
    let sym = (p - p.transpose()).amax();
    let idem = (p * p - p).amax();
    (sym, idem)
}

/// Agreement between the Fourier and dense null-space projectors on random
/// inputs, plus the defining identities of the dense projectors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NullSpaceCheck {
    pub trials: usize,
    /// Largest `|P_H^fourier x - P_H^dense x| / |x|`.
    pub max_relative_error: f64,
    pub range_symmetry: f64,
    pub range_idempotence: f64,
    /// Largest entry of `A P_H`.
    pub forward_null_residual: f64,
}

/// Compares [`fourier_null_projector`] with the SVD projectors on `trials`
/// uniform random inputs. Requires `d = 1`.
pub fn check_null_space(op: &BccbOperator, trials: usize, seed: u64) -> Result<NullSpaceCheck> {
    let gains = fourier_null_projector(op)?;
    let dense = dense_projectors(op)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n2 = op.input_len();
    let mut max_relative_error: f64 = 0.0;
    for _ in 0..trials {
        let x: Vec<f64> = (0..n2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fourier = DVector::from_vec(apply_gains(&gains, &x)?);
        let xv = DVector::from_vec(x);
        let reference = &dense.null * &xv;
        max_relative_error = max_relative_error.max((fourier - reference).norm() / xv.norm());
    }
    let (range_symmetry, range_idempotence) = projector_defects(&dense.range);
    let forward_null_residual = (op.dense()? * &dense.null).amax();
    Ok(NullSpaceCheck {
        trials,
        max_relative_error,
        range_symmetry,
        range_idempotence,
        forward_null_residual,
    })
}
