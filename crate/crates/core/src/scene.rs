//! Synthetic periodic test scenes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ImagePlane;

/// Number of cosine components per channel.
const COMPONENTS: usize = 24;

fn cosine_field(height: usize, width: usize, max_freq: i64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut waves = Vec::with_capacity(COMPONENTS);
    for _ in 0..COMPONENTS {
        let u = rng.random_range(-max_freq..=max_freq);
        let v = rng.random_range(0..=max_freq);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = 1.0 / (1.0 + ((u * u + v * v) as f64).sqrt());
        waves.push((u as f64, v as f64, phase, amp));
    }
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            for &(u, v, phase, amp) in &waves {
                let arg = 2.0 * PI * (u * c as f64 / width as f64 + v * r as f64 / height as f64);
                acc += amp * (arg + phase).cos();
            }
            data.push(acc);
        }
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
    data.iter().map(|v| 0.2 + 0.6 * (v - lo) / span).collect()
}

/// Single-channel sum of random cosines with integer frequencies of at most
/// `max_freq` cycles per image along each axis, rescaled to `[0.2, 0.8]`.
/// The scene is periodic on the grid and exactly band-limited.
pub fn band_limited_scene(height: usize, width: usize, max_freq: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = cosine_field(height, width, max_freq.max(1) as i64, &mut rng);
    ImagePlane::new(height, width, 1, data).expect("finite scene")
}

/// Three independent correlated channels built like [`band_limited_scene`],
/// sharing a common luminance component so that the colours stay plausible.
pub fn band_limited_rgb(height: usize, width: usize, max_freq: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = max_freq.max(1) as i64;
    let base = cosine_field(height, width, f, &mut rng);
    let planes: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let tint = cosine_field(height, width, f, &mut rng);
            base.iter().zip(&tint).map(|(b, t)| 0.7 * b + 0.3 * t).collect()
        })
        .collect();
    ImagePlane::from_planes(height, width, &planes).expect("finite scene")
}
