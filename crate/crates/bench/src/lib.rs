//! Benchmark-only crate; the inputs shared by the benches live here.

use burstlab_core::geometry::{synth_trajectory, Burst};
use burstlab_core::pipeline::{simulate_with_trajectory, SimulationConfig};
use burstlab_core::raw_sensor::NoiseParams;
use burstlab_core::scene::band_limited_rgb;
use burstlab_core::ImagePlane;

/// Noiseless burst of `n_frames` frames at factor `sr` from a `size x size`
/// scene.
pub fn synthetic_burst(size: usize, n_frames: usize, sr: usize) -> (ImagePlane, Burst) {
    let gt = band_limited_rgb(size, size, size / 8, 1);
    let traj = synth_trajectory(n_frames, 2.0, 0.9, 3).expect("valid tremor parameters");
    let cfg = SimulationConfig {
        n_frames,
        sr_factor: sr,
        patch: size,
        noise: NoiseParams::noiseless(),
        ..SimulationConfig::default()
    };
    let sample = simulate_with_trajectory(&gt, &traj, &cfg).expect("scene matches the configuration");
    (sample.gt, sample.burst)
}
